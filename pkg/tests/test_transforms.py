import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from csimtl.errors import ConfigError, DegenerateScaleError, ZeroReferenceError
from csimtl.nn import ShapeError
from csimtl.transforms import (
    NEG_INF_DB,
    DftPair,
    denormalize,
    energy_ratio,
    fit_scale,
    from_angular_delay,
    nmse,
    normalize,
    to_angular_delay,
    truncate,
)


def naive_angular_delay(h):
    """Quadruple loop over H = F_d H_sf F_a^H with unitary scaling."""
    rows, cols = len(h), len(h[0])
    out = [[0j] * cols for _ in range(rows)]
    norm = 1 / math.sqrt(rows * cols)
    for k in range(rows):
        for q in range(cols):
            acc = 0j
            for n in range(rows):
                for t in range(cols):
                    # F_a has the negative exponent; F_a^H contributes its conjugate
                    f_a = cmath.exp(-2j * math.pi * q * t / cols)
                    acc += h[n][t] * cmath.exp(2j * math.pi * k * n / rows) * f_a.conjugate()
            out[k][q] = acc * norm
    return np.array(out)


def naive_nmse(h, h_hat):
    total = 0.0
    for a, b in zip(h, h_hat):
        num = den = 0.0
        for x, y in zip(np.ravel(a).tolist(), np.ravel(b).tolist()):
            num += abs(x - y) ** 2
            den += abs(x) ** 2
        total += num / den
    return total / len(h)


def _complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_dft_matrices_are_unitary():
    pair = DftPair.for_shape(72, 32)
    for f in (pair.delay, pair.angle):
        np.testing.assert_allclose(f @ f.conj().T, np.eye(len(f)), atol=1e-6)


def test_matrix_form_matches_fft_form():
    rng = np.random.default_rng(0)
    h = _complex(rng, (12, 8))
    np.testing.assert_allclose(DftPair.for_shape(12, 8).apply(h), to_angular_delay(h), atol=1e-12)


def test_constant_channel_maps_to_origin():
    h = np.ones((72, 32), complex)
    out = to_angular_delay(h)
    assert out[0, 0] == pytest.approx(72 * 32 / math.sqrt(72 * 32))
    out[0, 0] = 0
    assert np.max(np.abs(out)) < 1e-9


def test_matches_naive_dft_on_random_matrices():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h = _complex(rng, (16, 8))
        ref = naive_angular_delay(h.tolist())
        got = to_angular_delay(h)
        assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)
        back = from_angular_delay(got)
        assert np.linalg.norm(back - h) <= 1e-5 * np.linalg.norm(h)
        assert abs(np.linalg.norm(got) - np.linalg.norm(h)) <= 1e-5 * np.linalg.norm(h)


@given(arrays(np.complex128, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False)))
@settings(max_examples=60, deadline=None)
def test_unitarity_and_round_trip(h):
    norm = np.linalg.norm(h)
    out = to_angular_delay(h)
    assert abs(np.linalg.norm(out) - norm) <= 1e-5 * max(norm, 1e-12)
    assert np.linalg.norm(from_angular_delay(out) - h) <= 1e-5 * max(norm, 1e-12)


def test_dims_checked_against_pair():
    with pytest.raises(ShapeError):
        to_angular_delay(np.zeros((4, 4)), shape=(4, 5))


# ---------------------------------------------------------------- truncation


def test_energy_in_row_zero_is_fully_kept():
    h = np.zeros((10, 4), complex)
    h[0] = [1, 2j, 3, 4]
    for n in range(1, 11):
        assert energy_ratio(h, n) == 1.0


def test_uniform_energy_halves():
    assert energy_ratio(np.ones((8, 4)), 4) == pytest.approx(0.5)


def test_truncate_keeps_leading_rows():
    h = np.arange(24).reshape(6, 4)
    np.testing.assert_array_equal(truncate(h, 2), h[:2])


@pytest.mark.parametrize("n", [0, 7])
def test_truncate_bounds(n):
    with pytest.raises(ConfigError):
        truncate(np.ones((6, 4)), n)


def test_energy_ratio_monotone():
    h = _complex(np.random.default_rng(3), (20, 6))
    ratios = [energy_ratio(h, n) for n in range(1, 21)]
    assert all(a <= b + 1e-15 for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] == pytest.approx(1.0)


# ---------------------------------------------------------------- normalization


def test_normalize_maps_range_to_unit_interval():
    h = np.array([[-2 + 2j, 0j, 2 - 1j]])
    csi = normalize(h)
    assert csi.scale == 2.0
    assert csi.values.min() == 0.0 and csi.values.max() == 1.0
    assert csi.values[0, 0, 1] == 0.5 and csi.values[1, 0, 1] == 0.5


def test_denormalize_inverts_normalize():
    rng = np.random.default_rng(4)
    h = _complex(rng, (5, 8, 4))
    back = denormalize(normalize(h))
    np.testing.assert_allclose(back, h, rtol=1e-6, atol=1e-12)


def test_clamp_accounting_on_outlier():
    rng = np.random.default_rng(5)
    train = _complex(rng, (10, 4, 4))
    s = fit_scale(train)
    test = np.zeros((1, 4, 4), complex)
    test[0, 1, 2] = 1.2 * s  # real part beyond the training range
    test[0, 3, 3] = -1.5j * s
    csi = normalize(test, s)
    assert csi.clamped == 2
    assert csi.values.min() == 0.0 and csi.values.max() == 1.0
    assert normalize(train, s).clamped == 0


def test_all_zero_data_has_no_scale():
    with pytest.raises(DegenerateScaleError):
        normalize(np.zeros((3, 4, 4), complex))


# ---------------------------------------------------------------- nmse


def test_nmse_perfect_and_zero_reconstruction():
    h = _complex(np.random.default_rng(6), (4, 8, 8))
    assert nmse(h, h) == (0.0, NEG_INF_DB)
    lin, db = nmse(h, np.zeros_like(h))
    assert lin == 1.0 and db == 0.0


def test_nmse_matches_scalar_loop():
    rng = np.random.default_rng(7)
    for _ in range(100):
        h, g = _complex(rng, (10, 4, 3)), _complex(rng, (10, 4, 3))
        lin, db = nmse(h, g)
        ref = naive_nmse(h, g)
        assert lin == pytest.approx(ref, rel=1e-6)
        assert db == pytest.approx(10 * math.log10(ref), rel=1e-6)


def test_nmse_zero_reference_names_sample():
    h = _complex(np.random.default_rng(8), (5, 3, 3))
    h[3] = 0
    with pytest.raises(ZeroReferenceError) as info:
        nmse(h, h + 1)
    assert info.value.index == 3


def test_nmse_shape_mismatch():
    with pytest.raises(ShapeError):
        nmse(np.ones((2, 3, 3)), np.ones((2, 3, 4)))


@given(st.integers(-20, 20), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_nmse_scale_covariance_powers_of_two(exp, seed):
    rng = np.random.default_rng(seed)
    h, g = _complex(rng, (3, 4, 4)), _complex(rng, (3, 4, 4))
    c = 2.0**exp * (-1) ** exp
    assert nmse(c * h, c * g)[0] == nmse(h, g)[0]


@given(st.floats(1e-6, 1e6), st.booleans(), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_nmse_scale_covariance_general(c, negate, seed):
    rng = np.random.default_rng(seed)
    h, g = _complex(rng, (3, 4, 4)), _complex(rng, (3, 4, 4))
    c = -c if negate else c
    assert nmse(c * h, c * g)[0] == pytest.approx(nmse(h, g)[0], rel=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_nmse_nonnegative_and_zero_only_when_equal(seed):
    rng = np.random.default_rng(seed)
    h = _complex(rng, (2, 3, 3))
    g = h.copy()
    assert nmse(h, g)[0] == 0.0
    g[1, 2, 0] += 1e-3
    assert nmse(h, g)[0] > 0.0
