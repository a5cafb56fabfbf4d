import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbctkit.errors import HeaderError, PayloadMismatchError, UnitError
from cbctkit.volume import (
    VoxelVolume,
    denormalize,
    normalize_hu,
    read_volume,
    write_volume,
)


def _vol(values, spacing=(1.0, 1.0, 1.0), unit="HU"):
    return VoxelVolume(np.asarray(values, dtype=np.float32), spacing, unit=unit)


def test_round_trip_identity_zeros(tmp_path):
    vol = _vol(np.zeros((4, 4, 4)))
    base = str(tmp_path / "zeros")
    write_volume(vol, base)
    back = read_volume(base)
    assert back.dims == (4, 4, 4)
    assert back.spacing == vol.spacing
    assert back.origin == vol.origin
    assert back.unit == "HU"
    np.testing.assert_array_equal(back.values, vol.values)


def test_round_trip_bit_exact_single_voxel(tmp_path):
    values = np.zeros((3, 2, 5), dtype=np.float32)
    values[1, 0, 3] = 1000.0
    vol = _vol(values, spacing=(2.0, 2.0, 3.0))
    base = str(tmp_path / "one")
    write_volume(vol, base)
    back = read_volume(base)
    write_volume(back, str(tmp_path / "one2"))
    raw1 = open(base + ".raw", "rb").read()
    raw2 = open(str(tmp_path / "one2") + ".raw", "rb").read()
    assert raw1 == raw2
    np.testing.assert_array_equal(back.values, vol.values)


def test_rewrite_yields_identical_files(tmp_path):
    rng = np.random.default_rng(3)
    vol = _vol(rng.normal(size=(6, 5, 4)) * 500)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    write_volume(vol, a)
    write_volume(vol, b)
    for ext in (".json", ".raw"):
        ha = hashlib.sha256(open(a + ext, "rb").read()).hexdigest()
        hb = hashlib.sha256(open(b + ext, "rb").read()).hexdigest()
        assert ha == hb


def test_zero_volume_payload_is_zero_bytes(tmp_path):
    vol = _vol(np.zeros((3, 4, 5)))
    base = str(tmp_path / "z")
    write_volume(vol, base)
    raw = open(base + ".raw", "rb").read()
    assert len(raw) == 3 * 4 * 5 * 4
    assert raw == b"\x00" * len(raw)


def test_storage_order_x_fastest(tmp_path):
    nx, ny, nz = 3, 4, 2
    values = np.zeros((nx, ny, nz), dtype=np.float32)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                values[i, j, k] = i + 10 * j + 100 * k
    base = str(tmp_path / "order")
    write_volume(_vol(values), base)
    flat = np.frombuffer(open(base + ".raw", "rb").read(), dtype="<f4")
    # x varies fastest, then y, then z
    assert flat[0] == values[0, 0, 0]
    assert flat[1] == values[1, 0, 0]
    assert flat[nx] == values[0, 1, 0]
    assert flat[nx * ny] == values[0, 0, 1]


def test_truncated_payload_raises(tmp_path):
    vol = _vol(np.ones((4, 4, 4)))
    base = str(tmp_path / "trunc")
    write_volume(vol, base)
    blob = open(base + ".raw", "rb").read()
    open(base + ".raw", "wb").write(blob[:-4])
    with pytest.raises(PayloadMismatchError):
        read_volume(base)


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(str(tmp_path / "nope"))


def test_malformed_header_raises(tmp_path):
    vol = _vol(np.ones((2, 2, 2)))
    base = str(tmp_path / "bad")
    write_volume(vol, base)
    open(base + ".json", "w").write("{not json")
    with pytest.raises(HeaderError):
        read_volume(base)
    write_volume(vol, base)
    open(base + ".json", "w").write('{"dims": [2, 2, 2]}')
    with pytest.raises(HeaderError):
        read_volume(base)


def test_invalid_construction():
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2, 2)), (1, 1, 1), unit="bogus")


def test_values_are_immutable():
    vol = _vol(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 1.0


def test_normalize_endpoints():
    vol = _vol([[[-1500.0, 1000.0, -250.0]]])
    norm = normalize_hu(vol)
    assert norm.unit == "normalized"
    np.testing.assert_allclose(norm.values[0, 0], [-1.0, 1.0, 0.0], atol=1e-7)


def test_denormalize_endpoints():
    vol = _vol([[[0.0, 1.0]]], unit="normalized")
    hu = denormalize(vol)
    assert hu.unit == "HU"
    np.testing.assert_allclose(hu.values[0, 0], [-250.0, 1000.0], atol=1e-4)


def test_unit_tag_enforced():
    with pytest.raises(UnitError):
        denormalize(_vol(np.zeros((2, 2, 2)), unit="HU"))
    with pytest.raises(UnitError):
        normalize_hu(_vol(np.zeros((2, 2, 2)), unit="normalized"))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_round_trip_within_millipoint(seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(-2000, 2000, size=(4, 4, 4)).astype(np.float32)
    vol = _vol(values)
    back = denormalize(normalize_hu(vol))
    assert np.max(np.abs(back.values - values)) <= 1e-3


def test_normalize_is_affine():
    rng = np.random.default_rng(11)
    a = rng.uniform(-1500, 1000, size=(5, 5, 5)).astype(np.float32)
    b = rng.uniform(-1500, 1000, size=(5, 5, 5)).astype(np.float32)
    na = normalize_hu(_vol(a)).values
    nb = normalize_hu(_vol(b)).values
    np.testing.assert_allclose(na - nb, (a - b) / 1250.0, atol=1e-6)


def test_out_of_range_values_map_outside_unit_interval():
    vol = _vol([[[-2000.0, 1500.0]]])
    norm = normalize_hu(vol).values[0, 0]
    assert norm[0] < -1.0
    assert norm[1] > 1.0
