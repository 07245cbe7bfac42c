import numpy as np
import pytest

from ctofdot.core_types import (C0_MM_PER_PS, OpticalProperties, ScanConfig,
                                SlabMedium, TimeAxis, TransientSet, VolumeImage,
                                VoxelGrid, speed_in_medium, validate_scene)
from ctofdot.rng import RngStream, uniform_at, stream_state


def test_speed_vacuum():
    assert speed_in_medium(OpticalProperties(mu_s=1.0, n=1.0)) == C0_MM_PER_PS


def test_speed_tissue():
    v = speed_in_medium(OpticalProperties(mu_s=1.0, n=1.4))
    assert v == pytest.approx(0.299792458 / 1.4, rel=1e-12)
    assert v == pytest.approx(0.2141374, rel=1e-6)


def test_ballistic_transit_6p5mm():
    v = speed_in_medium(OpticalProperties(mu_s=1.0, n=1.4))
    assert 6.5 / v == pytest.approx(30.355, abs=5e-3)


def test_optical_properties_invariants():
    with pytest.raises(ValueError):
        OpticalProperties(mu_s=-1.0)
    with pytest.raises(ValueError):
        OpticalProperties(mu_s=1.0, mu_a=-0.1)
    with pytest.raises(ValueError):
        OpticalProperties(mu_s=1.0, g=1.0)
    with pytest.raises(ValueError):
        OpticalProperties(mu_s=1.0, n=0.9)
    p = OpticalProperties(mu_s=10.0, g=0.5)
    assert p.mu_s_reduced == pytest.approx(5.0)


def test_validate_scene_paper_setup_ok():
    medium = SlabMedium(OpticalProperties(mu_s=9.0), thickness=6.5,
                        lateral_extent=(50.0, 50.0))
    grid = VoxelGrid.centered((25, 25, 8), (1.0, 1.0, 0.75), z0=0.25)
    axis = TimeAxis(65, 200.0)
    scan = ScanConfig.confocal_grid(25, 25, 1.0, axis)
    assert scan.n_pairs == 625
    assert validate_scene(medium, grid, scan) == []


def test_validate_scene_grid_too_deep():
    medium = SlabMedium(OpticalProperties(mu_s=9.0), thickness=6.5)
    grid = VoxelGrid.centered((5, 5, 8), (1.0, 1.0, 1.0), z0=0.0)
    errors = validate_scene(medium, grid)
    assert any("exceeds slab depth" in e for e in errors)


def test_validate_scene_confocal_mismatch():
    medium = SlabMedium(OpticalProperties(mu_s=9.0), thickness=6.5)
    axis = TimeAxis(8, 100.0)
    scan = ScanConfig([[0, 0], [1, 0]], [[0, 0], [2, 0]], axis, confocal=True)
    errors = validate_scene(medium, None, scan)
    assert any("mismatched source/detector" in e for e in errors)


def test_validate_scene_scan_outside():
    medium = SlabMedium(OpticalProperties(mu_s=9.0), thickness=6.5,
                        lateral_extent=(10.0, 10.0))
    axis = TimeAxis(8, 100.0)
    scan = ScanConfig([[20.0, 0.0]], [[0.0, 0.0]], axis)
    errors = validate_scene(medium, None, scan)
    assert any("outside slab lateral extent" in e for e in errors)


def test_transient_nonnegativity_enforced():
    with pytest.raises(ValueError):
        TransientSet(np.array([[-1.0, 0.0]]))
    ts = TransientSet(np.array([[-1.0, 0.0]]), signed=True)
    assert ts.values[0, 0] == -1.0


def test_volume_image_shape_check():
    grid = VoxelGrid((2, 3, 4), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        VolumeImage(np.zeros((2, 3, 5)), grid)
    img = VolumeImage.zeros(grid)
    assert img.values.shape == (2, 3, 4)


def test_grid_centers():
    grid = VoxelGrid((2, 2, 2), (1.0, 1.0, 0.5), origin=(-1.0, -1.0, 0.0))
    c = grid.centers()
    assert c.shape == (2, 2, 2, 3)
    assert c[0, 0, 0].tolist() == [-0.5, -0.5, 0.25]
    assert grid.depth_centers.tolist() == [0.25, 0.75]


def test_time_axis():
    axis = TimeAxis(4, 100.0, gate_start=50.0)
    assert axis.gate_end == 450.0
    assert axis.centers.tolist() == [100.0, 200.0, 300.0, 400.0]
    with pytest.raises(ValueError):
        TimeAxis(0, 100.0)


class TestRngStream:
    def test_identical_keys_identical_sequences(self):
        a = RngStream(123, 45).uniforms(100)
        b = RngStream(123, 45).uniforms(100)
        assert np.array_equal(a, b)

    def test_worker_split_invariance(self):
        # drawing in two halves equals drawing in one go (counter-based)
        whole = RngStream(9, 2).uniforms(64)
        r = RngStream(9, 2)
        parts = np.concatenate([r.uniforms(10), r.uniforms(54)])
        assert np.array_equal(whole, parts)

    def test_random_access_matches_stream(self):
        s0 = stream_state(7, 3)
        stream = RngStream(7, 3).uniforms(20)
        assert uniform_at(s0, 13) == stream[13]

    def test_open_interval(self):
        u = RngStream(0, 0).uniforms(10000)
        assert u.min() > 0.0 and u.max() < 1.0

    def test_distinct_streams(self):
        a = RngStream(1, 0).uniforms(50)
        b = RngStream(1, 1).uniforms(50)
        c = RngStream(2, 0).uniforms(50)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_uniformity(self):
        u = RngStream(5, 5).uniforms(200000)
        assert abs(u.mean() - 0.5) < 0.005
        assert abs(u.var() - 1.0 / 12.0) < 0.002
