"""Synthetic clustered multipath channels and scenario datasets.

The generator is a deliberately small stand-in for clustered-delay-line
models.  Each cluster is a single ray with a complex Gaussian gain, a delay
on the OFDM sampling grid and a departure angle at a half-wavelength ULA::

    H[n, t] = sum_p a_p * exp(-2j*pi*n*df*tau_p) * exp(-1j*pi*t*sin(phi_p))

Rician profiles add a deterministic-amplitude line-of-sight ray at zero
delay, with the scattered clusters trailing it by at least one sample
period.  Because delays sit on the grid and never exceed the last retained
delay row, truncation keeps all of the energy.
"""
from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, PayloadLengthError, ProfileError
from .transforms import energy_ratio, fit_scale, normalize, to_angular_delay, truncate

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ScenarioProfile:
    name: str
    num_clusters: int
    delay_spread: float  # seconds, mean excess delay of the NLOS clusters
    angle_spread: float  # radians, Laplacian spread around the UE direction
    los_factor: float = 0.0  # linear Rician K; 0 means NLOS
    power_decay: float = 0.8  # power ratio between consecutive clusters
    mean_angle: float = 0.0
    direction_range: float = np.pi / 3  # UE direction ~ mean_angle + U(-r, r)
    subcarrier_spacing: float = 15e3
    num_subcarriers: int = 72
    num_antennas: int = 32
    num_delay_taps: int = 32
    max_delay: float | None = None  # defaults to the largest retained delay

    @property
    def sample_period(self) -> float:
        return 1.0 / (self.num_subcarriers * self.subcarrier_spacing)

    @property
    def delay_bound(self) -> float:
        return (self.num_delay_taps - 1) * self.sample_period

    @property
    def effective_max_delay(self) -> float:
        return self.delay_bound if self.max_delay is None else self.max_delay

    def violations(self) -> list[str]:
        v = []
        if self.num_clusters < 1:
            v.append(f"num_clusters={self.num_clusters} < 1")
        if self.delay_spread < 0:
            v.append(f"delay_spread={self.delay_spread} < 0")
        if self.angle_spread < 0:
            v.append(f"angle_spread={self.angle_spread} < 0")
        if self.los_factor < 0:
            v.append(f"los_factor={self.los_factor} < 0")
        if not 0 < self.power_decay <= 1:
            v.append(f"power_decay={self.power_decay} outside (0, 1]")
        if self.direction_range < 0:
            v.append(f"direction_range={self.direction_range} < 0")
        if self.subcarrier_spacing <= 0:
            v.append(f"subcarrier_spacing={self.subcarrier_spacing} <= 0")
        for attr in ("num_subcarriers", "num_antennas", "num_delay_taps"):
            if getattr(self, attr) < 1:
                v.append(f"{attr}={getattr(self, attr)} < 1")
        if self.num_delay_taps > self.num_subcarriers:
            v.append(
                f"num_delay_taps={self.num_delay_taps} > num_subcarriers={self.num_subcarriers}"
            )
        if self.max_delay is not None and not 0 <= self.max_delay <= self.delay_bound:
            v.append(f"max_delay={self.max_delay} outside [0, {self.delay_bound:.6g}]")
        return v

    def validate(self) -> "ScenarioProfile":
        v = self.violations()
        if v:
            raise ProfileError(v)
        return self

    def with_dims(self, num_subcarriers=None, num_antennas=None, num_delay_taps=None):
        return dataclasses.replace(
            self,
            num_subcarriers=num_subcarriers or self.num_subcarriers,
            num_antennas=num_antennas or self.num_antennas,
            num_delay_taps=num_delay_taps or self.num_delay_taps,
        )


_US = 1e-6

PRESETS = {
    p.name: p
    for p in (
        ScenarioProfile("cdlA-like", 24, 1.5 * _US, 0.35, power_decay=0.85),
        ScenarioProfile("cdlB-like", 16, 4.0 * _US, 0.25, power_decay=0.8),
        ScenarioProfile("cdlC-like", 12, 9.0 * _US, 0.15, power_decay=0.75),
        ScenarioProfile("cdlD-like", 6, 1.0 * _US, 0.2, los_factor=10.0, power_decay=0.7),
        ScenarioProfile("cdlE-like", 4, 12.0 * _US, 0.1, los_factor=10 ** 1.3, power_decay=0.9),
        ScenarioProfile("indoor-like", 8, 1.0 * _US, 0.6, power_decay=0.6),
        ScenarioProfile("outdoor-like", 20, 6.0 * _US, 0.08, power_decay=0.85),
    )
}


def get_profile(name: str) -> ScenarioProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; presets: {', '.join(PRESETS)}") from None


def load_profile(path) -> ScenarioProfile:
    """Read a profile from ``key = value`` lines naming :class:`ScenarioProfile` fields."""
    kinds = {f.name: f.type for f in dataclasses.fields(ScenarioProfile)}
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read profile {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or key not in kinds:
            raise ConfigError(f"{path}:{lineno}: expected one of {', '.join(kinds)} = value")
        try:
            if key == "name":
                values[key] = value
            elif kinds[key] == "int":
                values[key] = int(value)
            elif value.lower() in ("none", "auto") and key == "max_delay":
                values[key] = None
            else:
                values[key] = float(value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    missing = [k for k in ("name", "num_clusters", "delay_spread", "angle_spread") if k not in values]
    if missing:
        raise ConfigError(f"profile {path} lacks {', '.join(missing)}")
    return ScenarioProfile(**values).validate()


def channel_from_paths(gains, delays, angles, subcarrier_spacing, num_subcarriers, num_antennas):
    """Evaluate the multipath sum for explicit ray parameters."""
    gains = np.asarray(gains, dtype=complex)
    n = np.arange(num_subcarriers)[:, None]
    t = np.arange(num_antennas)[None, :]
    freq = np.exp(-2j * np.pi * n * subcarrier_spacing * np.asarray(delays)[None, :])
    space = np.exp(-1j * np.pi * np.sin(np.asarray(angles))[:, None] * t)
    return (freq * gains[None, :]) @ space


def draw_paths(profile: ScenarioProfile, rng):
    """Random ray parameters ``(gains, delays, angles)`` for one snapshot."""
    p = profile.num_clusters
    ts = profile.sample_period
    max_taps = int(np.floor(profile.effective_max_delay / ts + 1e-9))
    excess = rng.exponential(profile.delay_spread, size=p) if profile.delay_spread > 0 else np.zeros(p)
    excess[0] = 0.0
    k = profile.los_factor
    # scattered clusters trail a line-of-sight ray by at least one tap
    first = 1 if k > 0 else 0
    taps = np.minimum(first + np.rint(excess / ts), max_taps)
    taps.sort()
    power = profile.power_decay ** np.arange(p)
    power /= power.sum()
    nlos = np.sqrt(power / (k + 1) / 2) * (rng.standard_normal(p) + 1j * rng.standard_normal(p))
    centre = profile.mean_angle
    if profile.direction_range > 0:
        centre += rng.uniform(-profile.direction_range, profile.direction_range)
    angles = centre + rng.laplace(0.0, profile.angle_spread / np.sqrt(2), size=p)
    if k > 0:
        los = np.sqrt(k / (k + 1)) * np.exp(2j * np.pi * rng.uniform())
        nlos = np.concatenate([[los], nlos])
        taps = np.concatenate([[0.0], taps])
        angles = np.concatenate([[centre], angles])
    angles = np.clip(angles, -np.pi / 2, np.pi / 2)
    return nlos, taps * ts, angles


def generate_channel(profile: ScenarioProfile, sample_seed) -> np.ndarray:
    """One spatial-frequency channel ``(num_subcarriers, num_antennas)``."""
    profile.validate()
    rng = np.random.default_rng(sample_seed)
    gains, delays, angles = draw_paths(profile, rng)
    return channel_from_paths(
        gains, delays, angles,
        profile.subcarrier_spacing, profile.num_subcarriers, profile.num_antennas,
    )


def sample_seed(master_seed: int, scenario: str, split: str, index: int) -> int:
    """Independent per-sample seed; stable across platforms and runs."""
    key = [int(master_seed), zlib.crc32(scenario.encode()), SPLITS.index(split), int(index)]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


@dataclass
class ScenarioDataset:
    """Normalized angular-delay samples ``(n, 2, n_delay, n_antennas)`` per split.

    Only the scenario id, seed and the float32 tensors are persisted; the
    remaining fields describe how the data was produced in this session.
    """

    scenario: str
    master_seed: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    scale: float | None = None
    profile: ScenarioProfile | None = None
    clamped: dict = field(default_factory=dict)
    energy_ratio: float | None = None

    def __post_init__(self):
        shapes = {a.shape[1:] for a in (self.train, self.val, self.test)}
        if len(shapes) != 1:
            raise ConfigError(f"splits disagree on sample dims: {sorted(shapes)}")

    @property
    def counts(self) -> dict:
        return {s: len(getattr(self, s)) for s in SPLITS}

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.train.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, ScenarioDataset):
            return NotImplemented
        return (
            self.scenario == other.scenario
            and self.master_seed == other.master_seed
            and all(
                getattr(self, s).dtype == getattr(other, s).dtype
                and np.array_equal(getattr(self, s), getattr(other, s))
                for s in SPLITS
            )
        )


def _check_counts(counts):
    bad = [f"{s}={counts.get(s)}" for s in SPLITS if not int(counts.get(s, 0)) >= 1]
    if bad:
        raise ConfigError("split counts must be >= 1: " + ", ".join(bad))


def generate_dataset(profile: ScenarioProfile, counts: dict, master_seed: int) -> ScenarioDataset:
    """Generate, transform, truncate and normalize every split.

    The normalization scale is fitted on the training split only; val/test
    components outside its range are clamped and counted.
    """
    profile.validate()
    _check_counts(counts)
    truncated, ratios = {}, []
    for split in SPLITS:
        hs = np.stack([
            generate_channel(profile, sample_seed(master_seed, profile.name, split, i))
            for i in range(int(counts[split]))
        ])
        h_ad = to_angular_delay(hs)
        ratios.append(energy_ratio(h_ad, profile.num_delay_taps))
        truncated[split] = truncate(h_ad, profile.num_delay_taps)
    scale = fit_scale(truncated["train"])
    arrays, clamped = {}, {}
    for split in SPLITS:
        csi = normalize(truncated[split], scale)
        arrays[split] = csi.values.astype(np.float32)
        clamped[split] = csi.clamped
    return ScenarioDataset(
        scenario=profile.name,
        master_seed=int(master_seed),
        scale=scale,
        profile=profile,
        clamped=clamped,
        energy_ratio=float(np.mean(np.concatenate(ratios))),
        **arrays,
    )


def mean_delay_profile(data: np.ndarray) -> np.ndarray:
    """Average per-row energy share of normalized samples ``(n, 2, rows, cols)``."""
    centered = np.asarray(data, dtype=np.float64) - 0.5
    rows = (centered ** 2).sum(axis=(1, 3))
    return (rows / rows.sum(axis=1, keepdims=True)).mean(axis=0)


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

DATASET_MAGIC = b"CSID"
DATASET_VERSION = 1
_MAX_ELEMENTS = 2**40


def dataset_to_bytes(ds: ScenarioDataset) -> bytes:
    name = ds.scenario.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ConfigError("scenario id longer than 65535 bytes")
    dims = ds.sample_shape
    if len(dims) != 3:
        raise ConfigError(f"samples must be 3-d (channels, rows, cols), got {dims}")
    head = DATASET_MAGIC + struct.pack("<IH", DATASET_VERSION, len(name)) + name
    head += struct.pack("<Q3I3I", ds.master_seed, *(ds.counts[s] for s in SPLITS), *dims)
    body = b"".join(
        np.ascontiguousarray(getattr(ds, s), dtype="<f4").tobytes() for s in SPLITS
    )
    return head + body


def dataset_from_bytes(buf: bytes) -> ScenarioDataset:
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {DATASET_MAGIC!r}", 0)
    off = 4
    if len(buf) < off + 6:
        raise PayloadLengthError("header truncated", len(buf))
    version, nlen = struct.unpack_from("<IH", buf, off)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", off)
    off += 6
    if len(buf) < off + nlen + 32:
        raise PayloadLengthError("header truncated", len(buf))
    try:
        scenario = bytes(buf[off : off + nlen]).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("scenario id is not UTF-8", off) from None
    off += nlen
    seed, *rest = struct.unpack_from("<Q3I3I", buf, off)
    counts, dims = rest[:3], rest[3:]
    dims_off = off + 8 + 12
    if dims[0] != 2 or min(dims) < 1:
        raise FormatError(f"invalid sample dims {tuple(dims)}", dims_off)
    per = math.prod(dims)  # exact ints: int64 would wrap on hostile dims
    total = per * sum(counts)
    if total > _MAX_ELEMENTS:
        raise FormatError(f"declared size {total} elements overflows", dims_off)
    off += 32
    need = off + 4 * total
    if len(buf) < need:
        raise PayloadLengthError(f"payload needs {need} bytes, file has {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need)
    data = np.frombuffer(buf, dtype="<f4", count=total, offset=off).astype(np.float32)
    arrays, start = {}, 0
    for split, n in zip(SPLITS, counts):
        arrays[split] = data[start * per : (start + n) * per].reshape((n,) + tuple(dims))
        start += n
    return ScenarioDataset(scenario=scenario, master_seed=seed, **arrays)


def save_dataset(ds: ScenarioDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> ScenarioDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
