import numpy as np
import pytest

from ctofdot.core_types import ScanConfig, TimeAxis, TransientSet, VolumeImage, VoxelGrid
from ctofdot.forward_ops import (ConvOperator, DenseOperator, KernelStack,
                                 MeasurementIndex, MultiplexMatrix,
                                 MultiplexedOperator, apply_conv,
                                 apply_conv_adjoint, apply_dense,
                                 apply_dense_adjoint, apply_multiplex,
                                 build_multiplex, collapse_time, demultiplex,
                                 extract_confocal)


def _random_dense(rng, n_src=3, n_det=2, n_bins=4, dims=(3, 2, 2)):
    grid = VoxelGrid(dims, (1.0, 1.0, 1.0))
    rows = MeasurementIndex.full(n_src, n_det, n_bins)
    mat = rng.normal(size=(len(rows), grid.n_voxels))
    return DenseOperator(mat, rows, grid), grid


class TestDense:
    def test_zero_maps_to_zero(self):
        rng = np.random.default_rng(0)
        op, grid = _random_dense(rng)
        out = apply_dense(op, VolumeImage.zeros(grid))
        assert not out.values.any()

    def test_unit_vector_reads_column(self):
        rng = np.random.default_rng(1)
        op, grid = _random_dense(rng)
        q = 5
        mu = np.zeros(grid.n_voxels)
        mu[q] = 1.0
        out = apply_dense(op, mu.reshape(grid.dims))
        assert np.array_equal(out.values.ravel(), op.matrix[:, q])

    def test_paper_scale_dimensions(self):
        # 100 sources x 100 detectors x 50 bins by 30*30*20 voxels
        rows = MeasurementIndex.full(100, 100, 50)
        assert len(rows) == 500_000
        assert 30 * 30 * 20 == 18_000

    def test_adjoint_identity(self):
        rng = np.random.default_rng(2)
        op, grid = _random_dense(rng)
        mu = rng.normal(size=grid.dims)
        m = rng.normal(size=op.meas_shape)
        lhs = np.vdot(op.apply(mu), m)
        rhs = np.vdot(mu, op.adjoint(m))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))

    def test_adjoint_basis_cases(self):
        rng = np.random.default_rng(3)
        op, grid = _random_dense(rng)
        assert not apply_dense_adjoint(op, np.zeros(op.meas_shape)).values.any()
        m = np.zeros(len(op.rows))
        m[7] = 1.0
        back = apply_dense_adjoint(op, m.reshape(op.meas_shape))
        assert np.array_equal(back.values.ravel(), op.matrix[7, :])

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(4)
        op, grid = _random_dense(rng)
        with pytest.raises(ValueError):
            apply_dense(op, np.zeros((2, 2, 2)))

    def test_linearity(self):
        rng = np.random.default_rng(5)
        op, grid = _random_dense(rng)
        a, b = rng.normal(size=(2,) + tuple(grid.dims))
        lhs = op.apply(2.0 * a + 3.0 * b)
        rhs = 2.0 * op.apply(a) + 3.0 * op.apply(b)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestExtractConfocal:
    def _full_scan_op(self, side, n_bins=2, seed=0):
        rng = np.random.default_rng(seed)
        axis = TimeAxis(n_bins, 100.0)
        scan = ScanConfig.confocal_grid(side, side, 1.0, axis)
        full = ScanConfig(scan.sources, scan.sources, axis, confocal=False)
        grid = VoxelGrid((2, 2, 1), (1.0, 1.0, 1.0))
        rows = MeasurementIndex.full(full.n_sources, full.n_detectors, n_bins)
        mat = rng.normal(size=(len(rows), grid.n_voxels))
        return DenseOperator(mat, rows, grid), full

    def test_ten_by_ten_reduction(self):
        op, full = self._full_scan_op(10)
        assert len(op.rows) == 10_000 * 2
        conf_scan = ScanConfig(full.sources, full.detectors, full.time_axis, confocal=True)
        sub = extract_confocal(op, conf_scan)
        assert len(sub.rows) == 100 * 2
        # rows match the diagonal entries of the original
        for i in (0, 42, 99):
            orig = np.where((op.rows.src == i) & (op.rows.det == i))[0]
            assert np.array_equal(sub.matrix[i * 2:(i + 1) * 2], op.matrix[orig])

    def test_already_confocal_identity(self):
        axis = TimeAxis(3, 100.0)
        scan = ScanConfig.confocal_grid(2, 2, 1.0, axis)
        grid = VoxelGrid((2, 2, 1), (1.0, 1.0, 1.0))
        rows = MeasurementIndex.pairs(np.arange(4), np.arange(4), 4, 4, 3)
        mat = np.random.default_rng(7).normal(size=(len(rows), 4))
        op = DenseOperator(mat, rows, grid)
        sub = extract_confocal(op, scan)
        assert np.array_equal(sub.matrix, op.matrix)

    def test_missing_rows(self):
        axis = TimeAxis(2, 100.0)
        scan = ScanConfig([[0, 0]], [[5.0, 5.0]], axis)
        grid = VoxelGrid((1, 1, 1), (1.0, 1.0, 1.0))
        rows = MeasurementIndex.full(1, 1, 2)
        op = DenseOperator(np.ones((2, 1)), rows, grid)
        with pytest.raises(ValueError):
            extract_confocal(op, scan)


def _stack(rng, n_depths=2, K=5, n_bins=6, pitch=1.0, kind="random"):
    axis = TimeAxis(n_bins, 100.0)
    if kind == "random":
        kern = rng.random((n_depths, K, K, n_bins))
    else:
        kern = np.zeros((n_depths, K, K, n_bins))
    depths = 1.0 + np.arange(n_depths) * pitch
    return KernelStack(kern, depths, pitch, axis)


def _grid_for(stack, L, W):
    n = stack.n_depths
    dz = stack.pitch if n == 1 else float(np.diff(stack.depth_list).mean())
    return VoxelGrid((L, W, n), (stack.pitch, stack.pitch, dz),
                     origin=(-L / 2.0, -W / 2.0, float(stack.depth_list[0]) - dz / 2))


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        stack = _stack(rng, n_depths=1, K=3, n_bins=4, kind="zeros")
        stack.kernels[0, 1, 1, 2] = 1.0  # delta at center, one bin
        grid = _grid_for(stack, 6, 5)
        mu = VolumeImage(rng.random(grid.dims), grid)
        out = apply_conv(stack, mu)
        m = out.values.reshape(6, 5, 4)
        assert np.allclose(m[:, :, 2], mu.values[:, :, 0], rtol=1e-12, atol=1e-14)
        assert np.abs(m[:, :, [0, 1, 3]]).max() < 1e-14

    def test_dense_equivalence_interior(self):
        rng = np.random.default_rng(1)
        stack = _stack(rng, n_depths=2, K=5, n_bins=6)
        grid = _grid_for(stack, 8, 7)
        op = ConvOperator(stack, grid)
        dense = op.to_dense()
        mu = rng.random(grid.dims)
        m_conv = op.apply(mu).reshape(8, 7, 6)
        m_dense = dense.apply(mu).reshape(8 * 7, 6).reshape(8, 7, 6)
        # interior rows only: boundary rows involve out-of-grid support
        interior = ~op.boundary_mask()
        diff = np.abs(m_conv - m_dense)[interior]
        scale = np.abs(m_dense)[interior].max()
        assert diff.max() <= 1e-10 * scale
        # and in fact the linear (zero-padded) convolution matches everywhere
        assert np.abs(m_conv - m_dense).max() <= 1e-10 * np.abs(m_dense).max()

    def test_shift_equivariance_interior(self):
        rng = np.random.default_rng(2)
        stack = _stack(rng, n_depths=1, K=3, n_bins=2)
        grid = _grid_for(stack, 9, 9)
        op = ConvOperator(stack, grid)
        mu = np.zeros(grid.dims)
        mu[4, 4, 0] = 1.0
        shifted = np.roll(mu, 1, axis=0)
        m0 = op.apply(mu).reshape(9, 9, 2)
        m1 = op.apply(shifted).reshape(9, 9, 2)
        assert np.allclose(np.roll(m0, 1, axis=0)[2:-2, 2:-2],
                           m1[2:-2, 2:-2], rtol=1e-12, atol=1e-14)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(3)
        stack = _stack(rng, n_depths=3, K=5, n_bins=4)
        grid = _grid_for(stack, 7, 6)
        op = ConvOperator(stack, grid)
        mu = rng.normal(size=grid.dims)
        m = rng.normal(size=op.meas_shape)
        lhs = np.vdot(op.apply(mu), m)
        rhs = np.vdot(mu, op.adjoint(m))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))

    def test_adjoint_zero_and_symmetric(self):
        rng = np.random.default_rng(4)
        stack = _stack(rng, n_depths=1, K=3, n_bins=2, kind="zeros")
        # symmetric (even) kernel: adjoint equals forward on symmetric input
        stack.kernels[0, :, :, 0] = [[0, 1, 0], [1, 2, 1], [0, 1, 0]]
        grid = _grid_for(stack, 5, 5)
        op = ConvOperator(stack, grid)
        assert not op.adjoint(np.zeros(op.meas_shape)).any()
        sym = np.zeros(grid.dims)
        sym[2, 2, 0] = 1.0
        fwd = op.apply(sym).reshape(5, 5, 2)
        adj = op.adjoint(np.concatenate([sym[:, :, :1], np.zeros((5, 5, 1))], axis=2)
                         .reshape(op.meas_shape))
        assert np.allclose(fwd[:, :, 0], adj[:, :, 0], rtol=1e-12, atol=1e-14)

    def test_geometry_validation(self):
        rng = np.random.default_rng(5)
        stack = _stack(rng, n_depths=2, K=3, n_bins=2)
        bad = VoxelGrid((4, 4, 2), (2.0, 2.0, 1.0), origin=(0, 0, 0.5))
        with pytest.raises(ValueError):
            ConvOperator(stack, bad)

    def test_kernel_stack_invariants(self):
        axis = TimeAxis(3, 100.0)
        with pytest.raises(ValueError):
            KernelStack(np.zeros((1, 4, 4, 3)), [1.0], 1.0, axis)  # even K
        with pytest.raises(ValueError):
            KernelStack(np.zeros((2, 3, 3, 3)), [2.0, 1.0], 1.0, axis)  # not increasing


class TestMultiplex:
    def test_hadamard_pm_orthogonality(self):
        S = build_multiplex("hadamard_pm", 64)
        assert np.array_equal(S.S @ S.S.T, 64 * np.eye(64))

    def test_hadamard01_entries(self):
        S = build_multiplex("hadamard01", 8)
        assert set(np.unique(S.S)) == {0.0, 1.0}
        # first pattern of (H+1)/2 turns every source on
        assert S.S[0].sum() == 8

    def test_identity(self):
        S = build_multiplex("identity", 5)
        assert np.array_equal(S.S, np.eye(5))

    def test_no_construction(self):
        with pytest.raises(ValueError):
            build_multiplex("hadamard01", 6)

    def test_far_field_groups_of_four(self):
        # 8x8 sources over a 50 mm field; 25 mm separation allows 4 at a time
        axis = TimeAxis(2, 100.0)
        scan = ScanConfig.confocal_grid(8, 8, 50.0 / 7.0, axis)
        S = build_multiplex("far_field_groups", 64, min_separation=25.0, scan=scan)
        sizes = S.S.sum(axis=1)
        assert sizes.max() == 4
        assert S.S.sum() == 64  # every source in exactly one group
        assert np.array_equal(S.S.sum(axis=0), np.ones(64))
        # verify the pairwise separation constraint
        for row in S.S:
            pos = scan.sources[row.astype(bool)]
            for i in range(len(pos)):
                for j in range(i + 1, len(pos)):
                    assert np.hypot(*(pos[i] - pos[j])) >= 25.0 - 1e-9

    def test_apply_identity_scheme(self):
        rng = np.random.default_rng(0)
        S = build_multiplex("identity", 4)
        full = TransientSet(rng.random((4, 3, 5)))
        y = apply_multiplex(S, full)
        assert np.array_equal(y.values, full.values)
        conf = TransientSet(rng.random((4, 5)))
        yc = apply_multiplex(S, conf)
        assert yc.values.shape == (4, 4, 5)
        for p in range(4):
            assert np.array_equal(yc.values[p, p], conf.values[p])
            off = [d for d in range(4) if d != p]
            assert not yc.values[p, off].any()

    def test_all_ones_row_sums_sources(self):
        rng = np.random.default_rng(1)
        m = TransientSet(rng.random((3, 2, 4)))
        S = MultiplexMatrix(np.ones((1, 3)), "far_field_groups")
        y = apply_multiplex(S, m)
        assert np.allclose(y.values[0], m.values.sum(axis=0), rtol=1e-14)

    def test_demultiplex_hadamard_pm(self):
        rng = np.random.default_rng(2)
        S = build_multiplex("hadamard_pm", 16)
        full = TransientSet(rng.random((16, 3, 4)))
        y = apply_multiplex(S, full)
        back = demultiplex(S, y)
        assert np.abs(back.values - full.values).max() < 1e-12
        conf = TransientSet(rng.random((16, 4)))
        yc = apply_multiplex(S, conf)
        backc = demultiplex(S, yc, confocal=True)
        assert np.abs(backc.values - conf.values).max() < 1e-12

    def test_far_field_demux_roundtrip(self):
        rng = np.random.default_rng(3)
        axis = TimeAxis(2, 100.0)
        scan = ScanConfig.confocal_grid(4, 4, 10.0, axis)
        S = build_multiplex("far_field_groups", 16, min_separation=19.0, scan=scan)
        conf = TransientSet(rng.random((16, 2)))
        y = apply_multiplex(S, conf)
        back = demultiplex(S, y)
        assert np.allclose(back.values, conf.values, rtol=1e-14)

    def test_multiplexed_operator_adjoint(self):
        rng = np.random.default_rng(4)
        stack = _stack(rng, n_depths=1, K=3, n_bins=4)
        grid = _grid_for(stack, 4, 4)
        op = ConvOperator(stack, grid)
        S = build_multiplex("hadamard01", 16)
        comp = MultiplexedOperator(S, op)
        mu = rng.normal(size=grid.dims)
        y = rng.normal(size=comp.meas_shape)
        lhs = np.vdot(comp.apply(mu), y)
        rhs = np.vdot(mu, comp.adjoint(y))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_collapse_time():
    rng = np.random.default_rng(5)
    grid = VoxelGrid((2, 2, 1), (1.0, 1.0, 1.0))
    rows = MeasurementIndex.full(2, 2, 3)
    mat = rng.normal(size=(len(rows), 4))
    op = DenseOperator(mat, rows, grid)
    cw = collapse_time(op)
    assert cw.matrix.shape == (4, 4)
    assert np.allclose(cw.matrix, mat.reshape(4, 3, 4).sum(axis=1), rtol=1e-14)
