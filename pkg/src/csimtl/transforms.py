"""Angular-delay transforms, truncation, normalization and NMSE.

A spatial-frequency channel ``(subcarriers, antennas)`` is mapped to the
angular-delay domain by a unitary 2-D DFT.  The delay kernel uses the
positive exponent, so a path delayed by ``k`` sample periods lands in delay
row ``k``; rows beyond the first ``n_delay`` are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateScaleError, ZeroReferenceError
from .nn import ShapeError

#: Reported in place of -inf dB (perfect reconstruction); keeps reports numeric.
NEG_INF_DB = -1e9


def dft_matrix(n: int, sign: int = -1) -> np.ndarray:
    """Unitary ``n x n`` DFT matrix with kernel ``exp(sign * 2j*pi*k*m/n)``."""
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


@dataclass(frozen=True)
class DftPair:
    """Delay and angle DFT matrices for ``H = F_d @ H_sf @ F_a^H``."""

    delay: np.ndarray
    angle: np.ndarray

    @classmethod
    def for_shape(cls, num_subcarriers: int, num_antennas: int) -> "DftPair":
        return cls(delay=dft_matrix(num_subcarriers, +1), angle=dft_matrix(num_antennas, -1))

    def apply(self, h_sf):
        return self.delay @ h_sf @ self.angle.conj().T


def to_angular_delay(h_sf, shape=None) -> np.ndarray:
    """Map ``(..., subcarriers, antennas)`` channels to the angular-delay domain.

    Equivalent to :meth:`DftPair.apply` but computed with FFTs.
    """
    h_sf = np.asarray(h_sf)
    if h_sf.ndim < 2:
        raise ShapeError(f"expected (..., subcarriers, antennas), got {h_sf.shape}")
    if shape is not None and tuple(h_sf.shape[-2:]) != tuple(shape):
        raise ShapeError(f"channel dims {h_sf.shape[-2:]} do not match DFT dims {tuple(shape)}")
    return np.fft.ifft2(h_sf, axes=(-2, -1), norm="ortho")


def from_angular_delay(h_ad, shape=None) -> np.ndarray:
    h_ad = np.asarray(h_ad)
    if h_ad.ndim < 2:
        raise ShapeError(f"expected (..., delay, angle), got {h_ad.shape}")
    if shape is not None and tuple(h_ad.shape[-2:]) != tuple(shape):
        raise ShapeError(f"channel dims {h_ad.shape[-2:]} do not match DFT dims {tuple(shape)}")
    return np.fft.fft2(h_ad, axes=(-2, -1), norm="ortho")


def _check_taps(h, n_delay):
    rows = np.shape(h)[-2]
    if not 1 <= n_delay <= rows:
        raise ConfigError(f"n_delay must lie in [1, {rows}], got {n_delay}")


def truncate(h_ad, n_delay: int) -> np.ndarray:
    """Keep the first ``n_delay`` delay rows."""
    _check_taps(h_ad, n_delay)
    return np.asarray(h_ad)[..., :n_delay, :]


def energy_ratio(h_ad, n_delay: int):
    """Fraction of channel energy kept by :func:`truncate` (per sample)."""
    _check_taps(h_ad, n_delay)
    p = np.abs(np.asarray(h_ad)) ** 2
    total = p.sum(axis=(-2, -1))
    return p[..., :n_delay, :].sum(axis=(-2, -1)) / total


@dataclass
class AngularDelayCsi:
    """Network-range CSI: real/imag planes mapped affinely into ``[0, 1]``.

    ``values`` has shape ``(..., 2, n_delay, n_antennas)``; ``scale`` is the
    half-width ``S`` of the affine map and ``clamped`` counts the components
    that fell outside ``[-S, S]``.
    """

    values: np.ndarray
    scale: float
    clamped: int = 0


def fit_scale(h) -> float:
    """Largest absolute real or imaginary component."""
    h = np.asarray(h)
    s = float(max(np.max(np.abs(h.real), initial=0.0), np.max(np.abs(h.imag), initial=0.0)))
    if s == 0.0:
        raise DegenerateScaleError("all-zero data has no normalization scale")
    return s


def normalize(h, scale: float | None = None) -> AngularDelayCsi:
    """``x -> x / (2 S) + 0.5`` per real/imag component, clamped to ``[0, 1]``.

    ``scale`` defaults to :func:`fit_scale` of ``h`` itself; pass the
    training-split scale for validation and test data.
    """
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise ValueError("normalize: non-finite input")
    if scale is None:
        scale = fit_scale(h)
    if not scale > 0:
        raise DegenerateScaleError(f"scale must be positive, got {scale}")
    planes = np.stack([h.real, h.imag], axis=-3) / (2 * scale) + 0.5
    outside = (planes < 0) | (planes > 1)
    return AngularDelayCsi(np.clip(planes, 0.0, 1.0), float(scale), int(outside.sum()))


def denormalize(csi: AngularDelayCsi | np.ndarray, scale: float | None = None) -> np.ndarray:
    """Inverse of :func:`normalize` (up to clamping); returns complex data."""
    if isinstance(csi, AngularDelayCsi):
        values, scale = csi.values, csi.scale if scale is None else scale
    else:
        values = np.asarray(csi)
    if scale is None:
        raise ValueError("denormalize needs a scale")
    centered = (np.asarray(values, dtype=np.float64) - 0.5) * (2 * scale)
    return centered[..., 0, :, :] + 1j * centered[..., 1, :, :]


def to_db(linear: float) -> float:
    return 10 * np.log10(linear) if linear > 0 else NEG_INF_DB


def nmse(h, h_hat) -> tuple[float, float]:
    """Mean per-sample ``||H - H_hat||^2 / ||H||^2``; returns ``(linear, dB)``.

    Inputs are batches ``(n, ...)`` of complex (or real) arrays.  A perfect
    reconstruction reports :data:`NEG_INF_DB`.
    """
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    if h.shape != h_hat.shape:
        raise ShapeError(f"nmse: reference {h.shape} vs reconstruction {h_hat.shape}")
    if h.shape[0] == 0:
        raise ConfigError("nmse of an empty batch")
    axes = tuple(range(1, h.ndim))
    ref = np.sum(np.abs(h) ** 2, axis=axes)
    zero = np.flatnonzero(ref == 0)
    if zero.size:
        raise ZeroReferenceError(int(zero[0]))
    err = np.sum(np.abs(h - h_hat) ** 2, axis=axes)
    linear = float(np.mean(err / ref))
    return linear, float(to_db(linear))
