"""Quantitative evaluation: conditioning, PSNR, resolution, runtime.

These harnesses reproduce the comparison methodology of the simulation
experiments: singular-spectrum conditioning of competing operator
designs, PSNR-versus-integration-time multiplexing sweeps, two-line
resolution tests with an explicit dip criterion, and forward/solve
runtime benchmarks.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.signal

from .core_types import TransientSet, VolumeImage, VoxelGrid
from .forward_ops import (ConvOperator, DenseOperator, KernelStack,
                          MultiplexMatrix, apply_multiplex, demultiplex)
from .inverse_solver import SolveParams, fista
from .noise_model import AcquisitionModel, expected_counts, pattern_scales, sample_counts

PSNR_MAX_DB = 300.0  # sentinel for an exact reconstruction


def _as_matrix(op) -> np.ndarray:
    if isinstance(op, DenseOperator):
        return op.matrix
    return np.asarray(op, dtype=np.float64)


def singular_spectrum(op) -> np.ndarray:
    """Descending singular values normalized so the largest is 1."""
    mat = _as_matrix(op)
    if not np.all(np.isfinite(mat)):
        raise ValueError("operator matrix contains non-finite entries")
    sv = scipy.linalg.svdvals(mat)
    if sv.size == 0 or sv[0] == 0:
        return sv
    return sv / sv[0]


def conditioning_report(ops: dict, floor: float = 1e-2) -> dict:
    """Minimum retained singular value and retained count per operator.

    Values below `floor` (relative to the largest) count as below the
    noise floor; the reported minimum is unnormalized, as in singular
    value plots normalized to 1 with an absolute retention threshold.
    """
    out = {}
    for name, op in ops.items():
        sv = scipy.linalg.svdvals(_as_matrix(op))
        if sv.size == 0 or sv[0] == 0:
            out[name] = {"min_sv_above_floor": 0.0, "count_above_floor": 0}
            continue
        keep = sv[sv / sv[0] >= floor]
        out[name] = {
            "min_sv_above_floor": float(keep.min()),
            "count_above_floor": int(keep.size),
        }
    return out


def psnr(recon: VolumeImage, truth: VolumeImage) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the truth image."""
    r = recon.values if isinstance(recon, VolumeImage) else np.asarray(recon)
    t = truth.values if isinstance(truth, VolumeImage) else np.asarray(truth)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    peak = float(t.max())
    if peak <= 0.0:
        raise ValueError("truth image has no positive peak; PSNR undefined")
    mse = float(np.mean((r - t) ** 2))
    if mse == 0.0:
        return PSNR_MAX_DB
    return 10.0 * np.log10(peak * peak / mse)


def temporal_centroid(values: np.ndarray, axis: int = -1) -> float:
    """First-moment arrival index of a transient."""
    v = np.asarray(values, dtype=np.float64)
    total = v.sum()
    if total <= 0:
        return float("nan")
    idx = np.arange(v.shape[axis])
    shaped = np.moveaxis(v, axis, -1)
    return float((shaped * idx).sum() / total)


def kernel_nrmse(a: KernelStack, b: KernelStack) -> float:
    """Shape discrepancy between two kernel stacks.

    Both stacks are normalized to unit total mass before comparison so
    backends with different absolute calibrations are judged on shape;
    the result is RMS difference over RMS of the reference (first) stack.
    """
    ka = np.asarray(a.kernels, dtype=np.float64)
    kb = np.asarray(b.kernels, dtype=np.float64)
    if ka.shape != kb.shape:
        raise ValueError(f"kernel shapes differ: {ka.shape} vs {kb.shape}")
    na = ka / ka.sum()
    nb = kb / kb.sum()
    return float(np.sqrt(np.mean((na - nb) ** 2)) / np.sqrt(np.mean(na**2)))


# ---------------------------------------------------------------------------
# resolution test


@dataclass
class ResolutionPipeline:
    """Everything the two-line resolution harness needs to run end to end.

    `data_kernels` generates the measurements (defaults to `kernels`);
    keeping it distinct from the reconstruction operator avoids the
    inverse crime when the operator is itself an estimate.
    """

    grid: VoxelGrid
    kernels: KernelStack
    solver: SolveParams
    acquisition: Optional[AcquisitionModel] = None
    source_rate: float = 1.0  # converts per-photon forward output to counts/s
    noise_seed: int = 0
    amplitude: float = 1.0
    data_kernels: Optional[KernelStack] = None


def two_line_phantom(grid: VoxelGrid, line_width: float, separation: float,
                     depth_index: int = 0, amplitude: float = 1.0) -> VolumeImage:
    """Two lines along y, `line_width` wide, inner edges `separation` apart."""
    xs = grid.axis_centers(0)
    v = np.zeros(grid.dims)
    left = (-separation / 2.0 - line_width <= xs) & (xs <= -separation / 2.0)
    right = (separation / 2.0 <= xs) & (xs <= separation / 2.0 + line_width)
    v[left | right, :, depth_index] = amplitude
    return VolumeImage(v, grid)


def _line_centers(line_width: float, separation: float) -> tuple[float, float]:
    return (-(separation + line_width) / 2.0, (separation + line_width) / 2.0)


def resolution_test(line_width: float, separation: float, depth_index: int,
                    pipeline: ResolutionPipeline) -> dict:
    """Forward + noise + reconstruction of a two-line phantom.

    Resolved means the profile dip between the lines falls below 0.735x
    the mean peak height (Rayleigh-style criterion) and both peaks land
    within one voxel of the true line centers.
    """
    grid = pipeline.grid
    truth = two_line_phantom(grid, line_width, separation, depth_index, pipeline.amplitude)
    op = ConvOperator(pipeline.kernels, grid)
    data_op = op if pipeline.data_kernels is None else ConvOperator(pipeline.data_kernels, grid)
    clean = data_op.apply(truth.values)
    meas = clean
    if pipeline.acquisition is not None:
        rates = TransientSet(np.maximum(clean, 0.0) * pipeline.source_rate)
        expd = expected_counts(rates, pipeline.acquisition)
        counts = sample_counts(expd, pipeline.noise_seed)
        t_s = pipeline.acquisition.integration_time_ms / 1000.0
        dark = pipeline.acquisition.dark_count_rate * t_s / rates.values.shape[-1]
        scales = pattern_scales(rates, pipeline.acquisition)
        meas = (counts.values.astype(np.float64) - dark) / (scales * t_s) / pipeline.source_rate
    recon, report = fista(op, meas.reshape(op.meas_shape), pipeline.solver)
    profile = np.abs(recon.values).sum(axis=(1, 2))
    xs = grid.axis_centers(0)
    pitch = grid.pitch[0]
    c_left, c_right = _line_centers(line_width, separation)
    peaks, _ = scipy.signal.find_peaks(profile)
    result = {
        "resolved": False,
        "contrast": float("nan"),
        "profile": profile,
        "recon": recon,
        "report": report,
        "truth": truth,
    }
    if len(peaks) < 2:
        return result
    top2 = peaks[np.argsort(profile[peaks])[-2:]]
    top2.sort()
    p_left, p_right = int(top2[0]), int(top2[1])
    localized = (abs(xs[p_left] - c_left) <= pitch + 1e-9 and
                 abs(xs[p_right] - c_right) <= pitch + 1e-9)
    dip = float(profile[p_left:p_right + 1].min())
    peak_mean = float((profile[p_left] + profile[p_right]) / 2.0)
    contrast = dip / peak_mean if peak_mean > 0 else float("nan")
    result["contrast"] = contrast
    result["resolved"] = bool(localized and contrast < 0.735)
    result["peak_positions"] = (float(xs[p_left]), float(xs[p_right]))
    return result


# ---------------------------------------------------------------------------
# runtime benchmark


def _median_time(fn: Callable[[], object], repeats: int = 5) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def runtime_benchmark(methods: dict, sweep: Sequence, sweep_name: str = "size",
                      solve_iters: int = 20, repeats: int = 5, threads: int = 1,
                      seed: int = 0) -> list[dict]:
    """Median wall time of forward+adjoint application and a full solve.

    `methods` maps a name to a factory: factory(sweep_value) must return
    (operator, measurement array). Each case is timed as one forward plus
    one adjoint application (median of `repeats`) and one fixed-iteration
    FISTA solve. Rows follow the CSV schema
    (method, param, value, wall_ms, threads, seed).
    """
    rows = []
    params = SolveParams(lambda_per_depth=0.0, max_iters=solve_iters, tolerance=0.0)
    for name, factory in methods.items():
        for size in sweep:
            op, meas = factory(size)
            meas = np.asarray(meas)
            op.apply(np.zeros(op.vol_shape))  # warm caches before timing

            def apply_adjoint():
                op.adjoint(op.apply(np.zeros(op.vol_shape)) - meas)

            wall_apply = _median_time(apply_adjoint, repeats)
            t0 = time.perf_counter()
            fista(op, meas, params)
            wall_solve = (time.perf_counter() - t0) * 1e3
            rows.append({"method": name, "param": f"{sweep_name}={size}",
                         "value": "apply_adjoint", "wall_ms": wall_apply,
                         "threads": threads, "seed": seed})
            rows.append({"method": name, "param": f"{sweep_name}={size}",
                         "value": "solve", "wall_ms": wall_solve,
                         "threads": threads, "seed": seed})
    return rows


def write_benchmark_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "param", "value",
                                                "wall_ms", "threads", "seed"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# multiplexing PSNR study


@dataclass
class MultiplexStudyConfig:
    grid: VoxelGrid
    kernels: KernelStack
    truth: VolumeImage
    S: MultiplexMatrix
    solver: SolveParams
    source_rate: float  # detected counts/s at unit forward output
    max_count_rate: float = 5e6
    dark_count_rate: float = 200.0


def _reconstruct_from_rates(cfg: MultiplexStudyConfig, rates: np.ndarray):
    op = ConvOperator(cfg.kernels, cfg.grid)
    recon, _ = fista(op, rates.reshape(op.meas_shape), cfg.solver)
    return recon


def multiplex_psnr_run(cfg: MultiplexStudyConfig, integration_time_ms: float,
                       seed: int) -> dict:
    """One seed of the sequential-vs-multiplexed PSNR comparison.

    Both arms spend the same total acquisition time: N sequential
    captures of T versus N pattern captures of T. Demultiplexing uses
    the known pattern matrix and pile-up scales (a calibrated system).
    """
    op = ConvOperator(cfg.kernels, cfg.grid)
    clean = np.maximum(op.apply(cfg.truth.values), 0.0) * cfg.source_rate
    m_rates = TransientSet(clean)
    t_s = integration_time_ms / 1000.0
    n_t = clean.shape[-1]

    def acquire(rates: TransientSet, arm_seed: int) -> np.ndarray:
        acq = AcquisitionModel(integration_time_ms, cfg.max_count_rate,
                               cfg.dark_count_rate, seed=arm_seed)
        expd = expected_counts(rates, acq)
        counts = sample_counts(expd, arm_seed).values.astype(np.float64)
        dark = cfg.dark_count_rate * t_s / n_t
        scales = pattern_scales(rates, acq)
        return (counts - dark) / (scales * t_s)

    seq_rates = acquire(m_rates, seed)
    recon_seq = _reconstruct_from_rates(cfg, seq_rates / cfg.source_rate)

    if np.array_equal(cfg.S.S, np.eye(cfg.S.n_sources)):
        # identity patterns are literally sequential scanning
        recon_mux = recon_seq
    else:
        y = apply_multiplex(cfg.S, m_rates)
        y_rates = acquire(TransientSet(np.maximum(y.values, 0.0)), seed + 7919)
        demuxed = demultiplex(cfg.S, TransientSet(y_rates, signed=True), confocal=True)
        recon_mux = _reconstruct_from_rates(cfg, demuxed.values / cfg.source_rate)

    return {
        "psnr_sequential": psnr(recon_seq, cfg.truth),
        "psnr_multiplexed": psnr(recon_mux, cfg.truth),
        "recon_sequential": recon_seq,
        "recon_multiplexed": recon_mux,
    }


def multiplex_psnr_study(cfg: MultiplexStudyConfig, integration_times_ms: Sequence[float],
                         n_seeds: int = 10, seed0: int = 0) -> list[dict]:
    """Seed-averaged PSNR-vs-integration-time curves for both arms."""
    rows = []
    for t_ms in integration_times_ms:
        seq = []
        mux = []
        for k in range(n_seeds):
            res = multiplex_psnr_run(cfg, t_ms, seed0 + 1000 * k)
            seq.append(res["psnr_sequential"])
            mux.append(res["psnr_multiplexed"])
        rows.append({
            "integration_time_ms": float(t_ms),
            "psnr_sequential": float(np.mean(seq)),
            "psnr_multiplexed": float(np.mean(mux)),
            "n_seeds": n_seeds,
        })
    return rows
