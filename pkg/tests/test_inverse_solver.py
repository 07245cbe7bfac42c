import numpy as np
import pytest

from ctofdot.core_types import TimeAxis, VoxelGrid
from ctofdot.forward_ops import ConvOperator, KernelStack, build_multiplex
from ctofdot.inverse_solver import (MatrixOperator, SolveParams, StepSizeError,
                                    depth_weighted_lambda, fista, lambda_max,
                                    power_iteration, soft_threshold,
                                    solve_multiplexed)


class TestPowerIteration:
    def test_identity(self):
        op = MatrixOperator(np.eye(5))
        assert power_iteration(op) == pytest.approx(1.0, rel=1e-12)

    def test_diagonal(self):
        op = MatrixOperator(np.diag([1.0, 2.0, 3.0]))
        assert power_iteration(op) == pytest.approx(9.0, rel=1e-4)

    def test_matches_svd(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(50, 30))
        op = MatrixOperator(A)
        smax = np.linalg.svd(A, compute_uv=False)[0]
        assert power_iteration(op) == pytest.approx(smax**2, rel=0.01)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(20, 20))
        assert power_iteration(MatrixOperator(A)) == power_iteration(MatrixOperator(A))


class TestSoftThreshold:
    def test_cases(self):
        assert soft_threshold(np.array(3.0), 1.0) == 2.0
        assert soft_threshold(np.array(-0.5), 1.0) == 0.0
        v = np.array([-2.0, 0.3, 5.0])
        assert np.array_equal(soft_threshold(v, 0.0), v)

    def test_nonneg(self):
        v = np.array([-3.0, 0.5, 2.0])
        assert np.array_equal(soft_threshold(v, 1.0, nonneg=True), [0.0, 0.0, 1.0])

    def test_rejects_negative_threshold(self):
        with pytest.raises(ValueError):
            soft_threshold(np.ones(3), -0.1)


class TestFista:
    def test_identity_no_reg(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=12)
        op = MatrixOperator(np.eye(12))
        x, rep = fista(op, m, SolveParams(lambda_per_depth=0.0, max_iters=50,
                                          tolerance=1e-14))
        assert np.abs(x - m).max() < 1e-8
        assert rep.converged

    def test_identity_with_reg_closed_form(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=9)
        lam = 0.4
        op = MatrixOperator(np.eye(9))
        x, rep = fista(op, m, SolveParams(lambda_per_depth=lam, max_iters=30))
        expect = soft_threshold(m, lam)
        assert np.abs(x - expect).max() < 1e-12

    def test_sparse_recovery(self):
        rng = np.random.default_rng(4)
        A = rng.normal(size=(200, 100)) / np.sqrt(200)
        truth = np.zeros(100)
        support = rng.choice(100, size=10, replace=False)
        truth[support] = rng.uniform(1.0, 2.0, size=10) * rng.choice([-1, 1], size=10)
        m = A @ truth
        lam = 1e-6 * np.abs(A.T @ m).max()
        op = MatrixOperator(A)
        x, rep = fista(op, m, SolveParams(lambda_per_depth=lam, max_iters=4000,
                                          tolerance=0.0))
        found = np.where(np.abs(x) > 1e-4 * np.abs(x).max())[0]
        assert set(found) == set(support)
        assert np.linalg.norm(x - truth) / np.linalg.norm(truth) < 1e-3
        # least-squares-on-support oracle agrees
        ls = np.zeros(100)
        ls[support], *_ = np.linalg.lstsq(A[:, support], m, rcond=None)[0], None
        assert np.linalg.norm(x[support] - ls[support]) / np.linalg.norm(ls[support]) < 1e-3

    def test_objective_envelope_monotone(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            A = rng.normal(size=(30, 20))
            m = rng.normal(size=30)
            lam = 0.1 * np.abs(A.T @ m).max()
            _, rep = fista(MatrixOperator(A), m,
                           SolveParams(lambda_per_depth=lam, max_iters=60, tolerance=0.0))
            env = np.minimum.accumulate(rep.objective_trace)
            assert all(a >= b - 1e-12 * abs(a) for a, b in zip(env, env[1:]))
            assert rep.objective_trace[-1] <= rep.objective_trace[0] + 1e-12

    def test_nonneg_output(self):
        rng = np.random.default_rng(6)
        A = rng.normal(size=(15, 10))
        m = rng.normal(size=15)
        x, _ = fista(MatrixOperator(A), m,
                     SolveParams(lambda_per_depth=0.01, max_iters=40, nonneg=True))
        assert (x >= 0).all()

    def test_divergence_detection(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(20, 10))
        m = rng.normal(size=20)
        L = power_iteration(MatrixOperator(A))
        with pytest.raises(StepSizeError):
            fista(MatrixOperator(A), m,
                  SolveParams(lambda_per_depth=0.0, max_iters=200,
                              step_size=40.0 / L, tolerance=0.0))

    def test_report_trace_length(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(8, 6))
        m = rng.normal(size=8)
        _, rep = fista(MatrixOperator(A), m,
                       SolveParams(lambda_per_depth=0.0, max_iters=7, tolerance=0.0))
        assert rep.iterations_run == 7
        assert len(rep.objective_trace) == 7
        d = rep.to_dict()
        assert set(d) == {"iterations_run", "objective_trace", "wall_time_ms",
                          "converged", "lipschitz"}


def _conv_problem(rng, L=6, W=6, H=2, K=3, T=4):
    axis = TimeAxis(T, 100.0)
    kern = rng.random((H, K, K, T)) * 0.3
    stack = KernelStack(kern, 1.0 + np.arange(H), 1.0, axis)
    grid = VoxelGrid((L, W, H), (1.0, 1.0, 1.0), origin=(-L / 2, -W / 2, 0.5))
    return ConvOperator(stack, grid), stack, grid


class TestLayerwiseLambda:
    def test_infinite_lambda_zeroes_layer(self):
        rng = np.random.default_rng(9)
        op, stack, grid = _conv_problem(rng)
        truth = rng.random(grid.dims)
        m = op.apply(truth)
        lam0 = 1e-4 * lambda_max(op, m)
        x, _ = fista(op, m, SolveParams(lambda_per_depth=[lam0, 1e12],
                                        max_iters=4000, tolerance=0.0))
        assert not x.values[:, :, 1].any()
        # remaining layer matches a solve against the layer-0-only operator
        sub_stack = KernelStack(stack.kernels[:1], stack.depth_list[:1], stack.pitch,
                                stack.time_axis)
        sub_grid = VoxelGrid((grid.dims[0], grid.dims[1], 1), grid.pitch, grid.origin)
        sub_op = ConvOperator(sub_stack, sub_grid)
        x_sub, _ = fista(sub_op, m, SolveParams(lambda_per_depth=lam0,
                                                max_iters=4000, tolerance=0.0))
        scale = max(np.abs(x_sub.values).max(), 1e-300)
        assert np.abs(x.values[:, :, 0] - x_sub.values[:, :, 0]).max() <= 1e-6 * scale

    def test_depth_weighted_schedule(self):
        rng = np.random.default_rng(10)
        _, stack, _ = _conv_problem(rng)
        lam = depth_weighted_lambda(2.0, stack)
        mass = stack.depth_mass()
        assert np.allclose(lam, 2.0 / mass)

    def test_scalar_broadcast(self):
        p = SolveParams(lambda_per_depth=0.5)
        assert np.array_equal(p.lambda_layers(4), [0.5] * 4)
        p2 = SolveParams(lambda_per_depth=[0.1, 0.2])
        with pytest.raises(ValueError):
            p2.lambda_layers(3)


class TestMultiplexedSolve:
    def test_identity_scheme_bit_identical(self):
        rng = np.random.default_rng(11)
        op, stack, grid = _conv_problem(rng, L=4, W=4, H=1)
        truth = rng.random(grid.dims)
        m = op.apply(truth)
        S = build_multiplex("identity", 16)
        params = SolveParams(lambda_per_depth=1e-9, max_iters=30, tolerance=0.0)
        x_plain, _ = fista(op, m, params)
        y = S.S[:, :, None] * m[None, :, :]
        x_mux, _ = solve_multiplexed(S, op, y, params)
        assert np.array_equal(x_plain.values, x_mux.values)

    def test_hadamard_recovers_same_solution(self):
        rng = np.random.default_rng(12)
        op, stack, grid = _conv_problem(rng, L=4, W=4, H=1)
        truth = rng.random(grid.dims)
        m = op.apply(truth)
        params = SolveParams(lambda_per_depth=0.0, max_iters=800, tolerance=0.0)
        x_plain, _ = fista(op, m, params)
        S = build_multiplex("hadamard_pm", 16)
        y = S.S[:, :, None] * m[None, :, :]
        x_mux, _ = solve_multiplexed(S, op, y, params)
        scale = np.abs(x_plain.values).max()
        assert np.abs(x_mux.values - x_plain.values).max() <= 1e-6 * scale

    def test_composed_adjoint(self):
        rng = np.random.default_rng(13)
        op, stack, grid = _conv_problem(rng, L=4, W=4, H=2)
        from ctofdot.forward_ops import MultiplexedOperator
        S = build_multiplex("hadamard_pm", 16)
        comp = MultiplexedOperator(S, op)
        mu = rng.normal(size=grid.dims)
        y = rng.normal(size=comp.meas_shape)
        lhs = np.vdot(comp.apply(mu), y)
        rhs = np.vdot(mu, comp.adjoint(y))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))
