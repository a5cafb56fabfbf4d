import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbctkit.errors import ConfigError
from cbctkit.geometry import (
    ConeBeamGeometry,
    full_view_set,
    make_desk_geometry,
    make_full_fan_geometry,
    make_reference_geometry,
    source_position,
    uniform_view_subset,
)


def test_reference_geometry_constants():
    geom = make_reference_geometry()
    assert geom.sad == 1000.0
    assert geom.sid == 1540.0
    assert geom.det == (366, 160)
    assert geom.pitch == (1.176, 2.688)
    assert geom.lateral_offset_u == 175.0
    assert geom.arc_deg == 360.0
    assert geom.fan_mode == "half-fan"
    assert geom.magnification == pytest.approx(1.54)


def test_desk_geometry_preserves_ratio():
    desk = make_desk_geometry()
    ref = make_reference_geometry()
    assert desk.magnification == pytest.approx(ref.magnification)
    # same physical detector extent, coarser pixels
    assert desk.det[0] * desk.pitch[0] == pytest.approx(
        ref.det[0] * ref.pitch[0], rel=0.01
    )
    assert 0 < desk.sad < desk.sid


def test_geometry_invariants_enforced():
    with pytest.raises(ConfigError):
        ConeBeamGeometry(sad=1600, sid=1540, det=(4, 4), pitch=(1, 1))
    with pytest.raises(ConfigError):
        ConeBeamGeometry(sad=1000, sid=1540, det=(4, 4), pitch=(1, 1), arc_deg=0)
    with pytest.raises(ConfigError):
        ConeBeamGeometry(
            sad=1000, sid=1540, det=(4, 4), pitch=(1, 1), fan_mode="half-fan"
        )
    with pytest.raises(ConfigError):
        ConeBeamGeometry(
            sad=1000,
            sid=1540,
            det=(4, 4),
            pitch=(1, 1),
            fan_mode="full-fan",
            lateral_offset_u=10.0,
        )


def test_geometry_json_round_trip(tmp_path):
    geom = make_reference_geometry()
    path = str(tmp_path / "geom.json")
    geom.save(path)
    assert ConeBeamGeometry.load(path) == geom


def test_full_view_set_quarters():
    geom = make_full_fan_geometry(arc_deg=360.0)
    vs = full_view_set(geom, 4)
    np.testing.assert_allclose(vs.angles, [0.0, 90.0, 180.0, 270.0])


def test_full_view_set_partial_arc_spacing():
    geom = make_full_fan_geometry(arc_deg=210.0)
    vs = full_view_set(geom, 8)
    np.testing.assert_allclose(np.diff(vs.angles), 210.0 / 8)
    assert vs.angles[0] == 0.0
    assert vs.angles[-1] < 210.0


def test_full_view_set_clinical_count():
    geom = make_reference_geometry()
    vs = full_view_set(geom, 491)
    np.testing.assert_allclose(np.diff(vs.angles), 360.0 / 491)
    assert vs.n_views == 491


def test_full_view_set_rejects_single_view():
    with pytest.raises(ConfigError):
        full_view_set(make_desk_geometry(), 1)


def test_view_angles_strictly_increasing_within_arc():
    geom = make_full_fan_geometry(arc_deg=210.0)
    for n in (2, 7, 50):
        vs = full_view_set(geom, n)
        assert np.all(np.diff(vs.angles) > 0)
        assert vs.angles[0] >= 0.0
        assert vs.angles[-1] < geom.arc_deg


def test_uniform_view_subset_examples():
    idx = uniform_view_subset(400, 25)
    np.testing.assert_array_equal(idx, np.arange(25) * 16)
    np.testing.assert_array_equal(np.diff(idx), 16)

    np.testing.assert_array_equal(uniform_view_subset(400, 400), np.arange(400))

    np.testing.assert_array_equal(uniform_view_subset(10, 3), [0, 3, 6])


def test_uniform_view_subset_divisible_sparse_50_of_400():
    idx = uniform_view_subset(400, 50)
    assert np.all(idx % 8 == 0)


def test_uniform_view_subset_brute_force_max_uniformity():
    # exhaustive oracle: no 3-subset of 10 has a smaller maximal cyclic gap
    total, k = 10, 3
    ours = tuple(uniform_view_subset(total, k))

    def max_cyclic_gap(subset):
        gaps = [b - a for a, b in zip(subset, subset[1:])]
        gaps.append(total - subset[-1] + subset[0])
        return max(gaps)

    best = min(max_cyclic_gap(s) for s in itertools.combinations(range(total), k))
    assert max_cyclic_gap(ours) == best


def test_uniform_view_subset_gap_invariant_exhaustive():
    for total in range(1, 1001):
        for k in range(1, total + 1):
            idx = uniform_view_subset(total, k)
            assert idx[0] == 0 and idx[-1] < total
            if k > 1:
                gaps = np.diff(idx)
                assert gaps.max() - gaps.min() <= 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1000), st.data())
def test_uniform_view_subset_gap_invariant_sampled(total, data):
    k = data.draw(st.integers(1, total))
    idx = uniform_view_subset(total, k)
    assert len(idx) == k
    assert len(np.unique(idx)) == k
    if k > 1:
        gaps = np.diff(idx)
        assert gaps.max() - gaps.min() <= 1


def test_uniform_view_subset_rejects_bad_k():
    with pytest.raises(ConfigError):
        uniform_view_subset(10, 0)
    with pytest.raises(ConfigError):
        uniform_view_subset(10, 11)


def test_source_position_convention():
    geom = make_reference_geometry()
    np.testing.assert_allclose(source_position(geom, 0.0), [1000.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(source_position(geom, 90.0), [0.0, 1000.0, 0.0], atol=1e-9)


def test_source_position_radius_and_periodicity():
    geom = make_desk_geometry()
    rng = np.random.default_rng(0)
    for theta in rng.uniform(-720, 720, size=100):
        pos = source_position(geom, theta)
        assert np.linalg.norm(pos) == pytest.approx(geom.sad, abs=1e-9)
        np.testing.assert_allclose(
            pos, source_position(geom, theta + 360.0), atol=1e-9
        )


def test_view_subset_of_view_set():
    geom = make_desk_geometry()
    dense = full_view_set(geom, 100)
    sparse = dense.subset(10)
    assert sparse.n_views == 10
    np.testing.assert_array_equal(sparse.indices, np.arange(10) * 10)
    np.testing.assert_allclose(sparse.angles, dense.angles[sparse.indices])
