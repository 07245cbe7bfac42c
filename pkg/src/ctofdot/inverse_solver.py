"""FISTA solver for L1-regularized linear inversion.

Minimizes 0.5 ||A mu - m||_2^2 + sum_z lambda(z) ||mu_z||_1 for any
operator exposing apply / adjoint / vol_shape / meas_shape (dense,
convolutional, or multiplexed composition). The squared data-fidelity is
the standard proximal-gradient form; the constant factor is absorbed
into lambda. Layer-wise lambda(z) counteracts the loss of sensitivity
with depth; a scalar lambda broadcasts over all layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core_types import TransientSet, VolumeImage
from .forward_ops import KernelStack, MultiplexMatrix, MultiplexedOperator


class StepSizeError(RuntimeError):
    """Objective rose for several consecutive iterations under a supplied step."""


class OperatorError(ValueError):
    """Operator produced non-finite values."""


@dataclass(frozen=True)
class SolveParams:
    lambda_per_depth: Union[float, Sequence[float]] = 0.0
    max_iters: int = 200
    step_size: Optional[float] = None  # gradient step; None = 1/L via power iteration
    nonneg: bool = False
    tolerance: float = 1e-6  # relative objective-change stop criterion

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambda_per_depth, dtype=np.float64))
        if np.any(lam < 0):
            raise ValueError("lambda must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")

    def lambda_layers(self, n_layers: int) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(self.lambda_per_depth, dtype=np.float64))
        if lam.size == 1:
            return np.full(n_layers, float(lam[0]))
        if lam.size != n_layers:
            raise ValueError(f"lambda_per_depth has {lam.size} entries for {n_layers} layers")
        return lam


@dataclass
class SolveReport:
    iterations_run: int
    objective_trace: list[float]
    wall_time_ms: float
    converged: bool
    lipschitz: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "iterations_run": self.iterations_run,
            "objective_trace": list(map(float, self.objective_trace)),
            "wall_time_ms": float(self.wall_time_ms),
            "converged": bool(self.converged),
            "lipschitz": float(self.lipschitz),
        }


class MatrixOperator:
    """Adapter presenting a plain matrix as a forward operator."""

    def __init__(self, matrix: np.ndarray, vol_shape=None, meas_shape=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.vol_shape = tuple(vol_shape) if vol_shape else (self.matrix.shape[1],)
        self.meas_shape = tuple(meas_shape) if meas_shape else (self.matrix.shape[0],)
        self.grid = None

    def apply(self, vol):
        return (self.matrix @ np.asarray(vol).ravel()).reshape(self.meas_shape)

    def adjoint(self, meas):
        return (self.matrix.T @ np.asarray(meas).ravel()).reshape(self.vol_shape)


def power_iteration(op, max_iters: int = 200, tol: float = 1e-6) -> float:
    """Largest eigenvalue of A^T A (the gradient Lipschitz constant).

    Deterministic: starts from the normalized all-ones volume.
    """
    v = np.ones(op.vol_shape, dtype=np.float64)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    lam = 0.0
    for _ in range(max_iters):
        w = op.adjoint(op.apply(v))
        if not np.all(np.isfinite(w)):
            raise OperatorError("operator produced non-finite values")
        lam = float(np.vdot(v, w).real)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if lam_prev > 0 and abs(lam - lam_prev) <= tol * lam_prev:
            break
        lam_prev = lam
    return lam


def soft_threshold(v: np.ndarray, theta, nonneg: bool = False) -> np.ndarray:
    """Proximal map of theta * |.|_1 (elementwise threshold theta >= 0)."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.asarray(theta) < 0):
        raise ValueError("threshold must be >= 0")
    if nonneg:
        return np.maximum(v - theta, 0.0)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def _layer_lambda_field(lam_layers: np.ndarray, vol_shape) -> np.ndarray:
    """Broadcastable lambda(z) over the volume (last axis = depth)."""
    if len(vol_shape) == 3:
        return lam_layers.reshape(1, 1, -1)
    if len(vol_shape) == 1:
        if lam_layers.size != 1:
            raise ValueError("flat volumes take a scalar lambda")
        return lam_layers
    raise ValueError(f"unsupported volume shape {vol_shape}")


def fista(op, m, params: SolveParams):
    """Run FISTA; returns (solution, SolveReport).

    The solution is a VolumeImage when the operator carries a grid,
    otherwise a raw array of op.vol_shape.
    """
    t_start = time.perf_counter()
    meas = m.values if isinstance(m, TransientSet) else np.asarray(m, dtype=np.float64)
    meas = meas.reshape(op.meas_shape)
    n_layers = op.vol_shape[-1] if len(op.vol_shape) == 3 else 1
    lam_layers = params.lambda_layers(n_layers)
    lam_field = _layer_lambda_field(lam_layers, op.vol_shape)

    lipschitz = float("nan")
    if params.step_size is not None:
        eta = float(params.step_size)
        if eta <= 0:
            raise StepSizeError("step size must be > 0")
    else:
        lipschitz = power_iteration(op)
        if lipschitz <= 0:
            lipschitz = 1.0
        eta = 1.0 / lipschitz

    x = np.zeros(op.vol_shape)
    y = x.copy()
    t_momentum = 1.0
    trace: list[float] = []
    converged = False
    rising = 0

    def objective(vol):
        resid = op.apply(vol) - meas
        l1 = float(np.sum(lam_field * np.sum(np.abs(vol), axis=tuple(range(len(op.vol_shape) - 1)))
                          if len(op.vol_shape) == 3 else lam_field * np.abs(vol)))
        return 0.5 * float(np.vdot(resid, resid).real) + l1

    for it in range(params.max_iters):
        grad = op.adjoint(op.apply(y) - meas)
        x_new = soft_threshold(y - eta * grad, eta * lam_field, nonneg=params.nonneg)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_momentum**2))
        y = x_new + ((t_momentum - 1.0) / t_next) * (x_new - x)
        x, t_momentum = x_new, t_next
        obj = objective(x)
        if not np.isfinite(obj):
            raise OperatorError("objective is non-finite; operator or data invalid")
        trace.append(obj)
        if len(trace) >= 2:
            prev = trace[-2]
            if params.step_size is not None:
                rising = rising + 1 if obj > prev else 0
                if rising >= 5:
                    raise StepSizeError(
                        f"objective rose for {rising} consecutive iterations; step {eta} exceeds 1/L")
            if abs(obj - prev) <= params.tolerance * max(abs(prev), 1e-300):
                converged = True
                break

    report = SolveReport(
        iterations_run=len(trace),
        objective_trace=trace,
        wall_time_ms=(time.perf_counter() - t_start) * 1e3,
        converged=converged,
        lipschitz=lipschitz if params.step_size is None else 1.0 / eta,
    )
    grid = getattr(op, "grid", None)
    if grid is not None:
        return VolumeImage(x, grid), report
    return x, report


def solve_multiplexed(S: MultiplexMatrix, op, y, params: SolveParams):
    """FISTA under the composed operator S . A (adjoint A^T S^T)."""
    return fista(MultiplexedOperator(S, op), y, params)


def lambda_max(op, m) -> float:
    """Smallest lambda for which the L1 solution is exactly zero: max |A^T m|.

    Useful for scale-free regularization choices (lambda = fraction of
    this), since measurement units vary wildly between per-photon
    probabilities and photon counts.
    """
    meas = m.values if isinstance(m, TransientSet) else np.asarray(m)
    return float(np.abs(op.adjoint(meas.reshape(op.meas_shape))).max())


def depth_weighted_lambda(lambda0: float, kernels: KernelStack) -> np.ndarray:
    """Layer-wise schedule lambda(z) = lambda0 / (per-layer kernel mass).

    Equalizes the effective sparsity pressure across depths, countering
    the falling sensitivity of deep layers.
    """
    mass = kernels.depth_mass()
    if np.any(mass <= 0):
        raise ValueError("kernel stack has a zero-mass layer")
    return lambda0 / mass
