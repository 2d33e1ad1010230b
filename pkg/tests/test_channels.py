import itertools
import struct

import numpy as np
import pytest

from csimtl.channels import (
    DATASET_MAGIC,
    PRESETS,
    ScenarioDataset,
    ScenarioProfile,
    channel_from_paths,
    dataset_from_bytes,
    dataset_to_bytes,
    draw_paths,
    generate_channel,
    generate_dataset,
    get_profile,
    load_dataset,
    load_profile,
    mean_delay_profile,
    sample_seed,
    save_dataset,
)
from csimtl.errors import ConfigError, FormatError, PayloadLengthError, ProfileError
from csimtl.transforms import energy_ratio, to_angular_delay

SMALL = dict(num_subcarriers=32, num_antennas=16, num_delay_taps=16)


def test_single_path_at_origin_is_flat():
    profile = ScenarioProfile("flat", 1, 0.0, 0.0, direction_range=0.0)
    h = generate_channel(profile, 123)
    assert h.shape == (72, 32)
    gains, _, _ = draw_paths(profile, np.random.default_rng(123))
    np.testing.assert_allclose(h, np.full(h.shape, gains[0]), rtol=1e-12)


def test_three_tap_delay_lands_in_row_three():
    df, nsub = 15e3, 72
    h = channel_from_paths([0.7 - 0.2j], [3 / (nsub * df)], [0.0], df, nsub, 32)
    p = np.abs(to_angular_delay(h)) ** 2
    assert p[3].sum() / p.sum() >= 0.999


def test_delay_row_against_direct_dft():
    # brute-force delay DFT of one antenna column of the closed-form channel
    df, nsub, tau = 15e3, 24, 5
    h = channel_from_paths([1.0], [tau / (nsub * df)], [0.3], df, nsub, 4)
    col = h[:, 0]
    row = [abs(sum(col[n] * np.exp(2j * np.pi * k * n / nsub) for n in range(nsub))) ** 2
           for k in range(nsub)]
    assert int(np.argmax(row)) == tau


def test_generation_is_deterministic():
    profile = get_profile("cdlA-like")
    a, b = generate_channel(profile, 99), generate_channel(profile, 99)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, generate_channel(profile, 100))


def test_invalid_profile_lists_violations():
    bad = ScenarioProfile("bad", 0, -1.0, 0.1, power_decay=1.5)
    with pytest.raises(ProfileError) as info:
        generate_channel(bad, 0)
    text = str(info.value)
    assert "num_clusters" in text and "delay_spread" in text and "power_decay" in text
    assert len(info.value.violations) == 3


def test_max_delay_beyond_truncation_rejected():
    with pytest.raises(ProfileError, match="max_delay"):
        ScenarioProfile("x", 2, 1e-6, 0.1, max_delay=1.0).validate()


def test_sample_seeds_differ_by_split_and_scenario():
    seeds = {sample_seed(7, sc, sp, i) for sc in ("a", "b") for sp in ("train", "val", "test")
             for i in range(50)}
    assert len(seeds) == 2 * 3 * 50


def test_dataset_counts_and_shapes():
    ds = generate_dataset(get_profile("cdlB-like").with_dims(**SMALL), {"train": 2, "val": 1, "test": 1}, 0)
    assert ds.counts == {"train": 2, "val": 1, "test": 1}
    assert ds.sample_shape == (2, 16, 16)
    assert ds.train.dtype == np.float32
    assert 0.0 <= ds.train.min() and ds.train.max() <= 1.0


def test_default_split_sizes():
    counts = {"train": 4000, "val": 1000, "test": 5000}
    profile = get_profile("cdlC-like").with_dims(num_subcarriers=16, num_antennas=4, num_delay_taps=8)
    assert generate_dataset(profile, counts, 1).counts == counts


def test_zero_count_rejected():
    with pytest.raises(ConfigError):
        generate_dataset(get_profile("cdlA-like"), {"train": 0, "val": 1, "test": 1}, 0)


def test_scenarios_yield_distinct_samples():
    counts = {"train": 20, "val": 5, "test": 5}
    a = generate_dataset(get_profile("cdlA-like").with_dims(**SMALL), counts, 3)
    b = generate_dataset(get_profile("cdlB-like").with_dims(**SMALL), counts, 3)
    for x in a.train:
        assert not any(np.array_equal(x, y) for y in b.train)


def test_splits_are_disjoint():
    ds = generate_dataset(get_profile("indoor-like").with_dims(**SMALL), {"train": 20, "val": 20, "test": 20}, 4)
    flat = [s.tobytes() for split in (ds.train, ds.val, ds.test) for s in split]
    assert len(set(flat)) == len(flat)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_energy_containment(name):
    profile = PRESETS[name]
    h = np.stack([generate_channel(profile, sample_seed(11, name, "train", i)) for i in range(1000)])
    assert energy_ratio(to_angular_delay(h), profile.num_delay_taps).mean() >= 0.99


def test_preset_delay_profiles_are_separated():
    counts = {"train": 300, "val": 1, "test": 1}
    profiles = {n: mean_delay_profile(generate_dataset(p, counts, 5).train) for n, p in PRESETS.items()}
    for a, b in itertools.combinations(profiles, 2):
        assert np.abs(profiles[a] - profiles[b]).sum() > 0.1, (a, b)


def test_profile_file(tmp_path):
    path = tmp_path / "p.profile"
    path.write_text("name = lab\nnum_clusters = 3\ndelay_spread = 2e-6  # seconds\n"
                    "angle_spread = 0.2\nlos_factor = 4\nmax_delay = none\n")
    profile = load_profile(path)
    assert profile.name == "lab" and profile.num_clusters == 3 and profile.los_factor == 4.0
    path.write_text("name = lab\nnum_clusters = 3\n")
    with pytest.raises(ConfigError, match="delay_spread"):
        load_profile(path)


# ---------------------------------------------------------------- dataset file


def _tiny():
    return generate_dataset(get_profile("cdlD-like").with_dims(num_subcarriers=8, num_antennas=4,
                                                               num_delay_taps=4),
                            {"train": 1, "val": 1, "test": 1}, 42)


def test_round_trip(tmp_path):
    ds = _tiny()
    path = tmp_path / "d.csid"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back == ds
    assert all(getattr(back, s).tobytes() == getattr(ds, s).tobytes() for s in ("train", "val", "test"))
    save_dataset(back, tmp_path / "e.csid")
    assert (tmp_path / "e.csid").read_bytes() == path.read_bytes()


def test_header_layout():
    buf = dataset_to_bytes(_tiny())
    assert buf[:4] == DATASET_MAGIC
    version, nlen = struct.unpack_from("<IH", buf, 4)
    assert version == 1 and buf[10 : 10 + nlen] == b"cdlD-like"
    seed, *rest = struct.unpack_from("<Q3I3I", buf, 10 + nlen)
    assert seed == 42 and rest == [1, 1, 1, 2, 4, 4]
    assert len(buf) == 10 + nlen + 32 + 3 * 2 * 4 * 4 * 4


def test_header_only_file_is_a_length_error():
    buf = dataset_to_bytes(_tiny())
    header = buf[: len(buf) - 3 * 32 * 4]
    with pytest.raises(PayloadLengthError):
        dataset_from_bytes(header)


def test_bad_magic_reports_offset_zero():
    buf = b"XXXX" + dataset_to_bytes(_tiny())[4:]
    with pytest.raises(FormatError) as info:
        dataset_from_bytes(buf)
    assert info.value.offset == 0


def test_version_and_overflow_errors():
    buf = bytearray(dataset_to_bytes(_tiny()))
    bad_version = bytes(buf[:4]) + struct.pack("<I", 2) + bytes(buf[8:])
    with pytest.raises(FormatError) as info:
        dataset_from_bytes(bad_version)
    assert info.value.offset == 4
    nlen = struct.unpack_from("<H", buf, 8)[0]
    dims_at = 10 + nlen + 8 + 12
    huge = bytearray(buf)
    struct.pack_into("<3I", huge, dims_at, 2, 2**31, 2**31)
    with pytest.raises(FormatError) as info:
        dataset_from_bytes(bytes(huge))
    assert info.value.offset == dims_at


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        dataset_from_bytes(dataset_to_bytes(_tiny()) + b"\0")


def test_equality_ignores_session_metadata():
    ds = _tiny()
    copy = ScenarioDataset(ds.scenario, ds.master_seed, ds.train.copy(), ds.val.copy(), ds.test.copy())
    assert copy == ds
    copy.test[0, 0, 0, 0] += 1
    assert copy != ds
