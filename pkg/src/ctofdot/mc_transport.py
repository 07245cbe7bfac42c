"""Seeded time-resolved Monte Carlo photon transport through the slab.

Produces transients, perturbation-MC sensitivity matrices, and confocal
PSF kernel stacks, in absorption and fluorescence modes. All entry
points are bit-deterministic for a fixed (seed, n_photons) regardless of
the numba thread count: randomness is counter-based per photon index and
partial accumulators are reduced in a fixed chunk order.

Sign conventions: absorption Jacobians carry dm/dmu_a <= 0; kernel
stacks store the positive response magnitude (the measurement *deficit*
per unit absorber, or the emitted signal for fluorescence), so the
convolutional forward model maps nonnegative heterogeneity maps to
nonnegative difference measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _mc_kernels as _k
from .core_types import (ScanConfig, SlabMedium, TimeAxis, TransientSet,
                         VolumeImage, VoxelGrid, ensure_valid_scene,
                         speed_in_medium)
from .forward_ops import DenseOperator, KernelStack, MeasurementIndex
from .rng import RngStream


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class McSettings:
    """Monte Carlo run controls; defaults target kernel estimation quality."""

    n_photons: int = 10_000_000
    seed: int = 0
    record_jacobian: bool = False
    roulette_threshold: float = 1e-4
    roulette_survival: float = 0.1
    fresnel_boundaries: bool = True

    def __post_init__(self):
        if self.n_photons < 1:
            raise InvalidParameterError("n_photons must be >= 1")
        if not 0.0 < self.roulette_threshold < 1.0:
            raise InvalidParameterError("roulette_threshold must be in (0, 1)")
        if not 0.0 < self.roulette_survival < 1.0:
            raise InvalidParameterError("roulette_survival must be in (0, 1)")


@dataclass(frozen=True)
class PhotonRecord:
    """One detected photon (debug/inspection path).

    `per_voxel_pathlength` is populated only by the Jacobian-recording
    machinery; the lightweight tracer leaves it None.
    """

    exit_position: tuple[float, float]
    arrival_time: float  # ps
    weight: float
    total_pathlength: float  # mm
    per_voxel_pathlength: Optional[dict] = None


def sample_step(rng: RngStream, mu_t: float, size: Optional[int] = None):
    """Exponential free-path sample(s) -ln(u)/mu_t with mean 1/mu_t."""
    if mu_t <= 0:
        raise InvalidParameterError(f"mu_t must be > 0, got {mu_t}")
    if size is None:
        return -math.log(rng.uniform()) / mu_t
    return -np.log(rng.uniforms(size)) / mu_t


def sample_scatter(rng: RngStream, g: float, size: Optional[int] = None):
    """Henyey-Greenstein deflection sample(s): (cos theta, phi)."""
    if not -1.0 < g < 1.0:
        raise InvalidParameterError(f"g must be in (-1, 1), got {g}")
    n = 1 if size is None else size
    u1 = rng.uniforms(n)
    u2 = rng.uniforms(n)
    if abs(g) < 1e-6:
        cost = 2.0 * u1 - 1.0
    else:
        tmp = (1.0 - g * g) / (1.0 - g + 2.0 * g * u1)
        cost = np.clip((1.0 + g * g - tmp * tmp) / (2.0 * g), -1.0, 1.0)
    phi = 2.0 * np.pi * u2
    if size is None:
        return float(cost[0]), float(phi[0])
    return cost, phi


def _n_chunks(n_photons: int, n_src: int, bytes_per_chunk: int,
              mem_budget: int = 1 << 28) -> int:
    """Chunk count for parallel accumulation.

    A pure function of the problem size (never of the thread count), so
    the reduction order and therefore the result bits are fixed.
    """
    by_photons = max(1, min(256, (n_photons + 65535) // 65536))
    cap = max(1, mem_budget // max(1, n_src * bytes_per_chunk))
    return max(1, min(by_photons, cap))


def _dummy_grid():
    return (np.zeros((1, 3)), np.zeros(3, dtype=np.int64), np.ones(3), np.zeros(1))


def _grid_arrays(grid: VoxelGrid, n_src: int):
    origin = np.tile(np.asarray(grid.origin, dtype=np.float64), (n_src, 1))
    dims = np.asarray(grid.dims, dtype=np.int64)
    pitch = np.asarray(grid.pitch, dtype=np.float64)
    return origin, dims, pitch


def _run_pairs(medium: SlabMedium, src_xy: np.ndarray, det_xy: np.ndarray,
               time_axis: TimeAxis, settings: McSettings, aperture: float,
               detect_back: bool, grid: Optional[VoxelGrid] = None,
               record_j: bool = False, overlay: Optional[np.ndarray] = None,
               props=None):
    """Shared driver for the pair-detection kernel; returns (T, W2, J) sums."""
    if aperture <= 0:
        raise InvalidParameterError("detector aperture must be > 0")
    p = props or medium.props
    n_src, n_det = src_xy.shape[0], det_xy.shape[1]
    n_bins = time_axis.n_bins
    if grid is not None:
        g_origin, g_dims, g_pitch = _grid_arrays(grid, n_src)
        n_cols = grid.n_voxels
    else:
        g_origin, g_dims, g_pitch, _ = _dummy_grid()
        n_cols = 0
    has_overlay = overlay is not None
    ov = np.zeros(max(1, n_cols)) if overlay is None else np.asarray(overlay, dtype=np.float64).ravel()
    bytes_per_chunk = 8 * n_det * n_bins * 2
    if record_j:
        bytes_per_chunk += 8 * n_det * n_bins * n_cols
    n_chunks = _n_chunks(settings.n_photons, n_src, bytes_per_chunk)
    t_part = np.zeros((n_src, n_chunks, n_det, n_bins))
    w2_part = np.zeros((n_src, n_chunks, n_det, n_bins))
    if record_j:
        j_part = np.zeros((n_src, n_chunks, n_det * n_bins, n_cols))
    else:
        j_part = np.zeros((1, 1, 1, 1))
    _k.trace_pairs(np.uint64(settings.seed), settings.n_photons, n_chunks,
                   np.ascontiguousarray(src_xy), np.ascontiguousarray(det_xy),
                   aperture / 2.0, detect_back,
                   p.mu_s, p.mu_a, p.g, p.n, speed_in_medium(p),
                   medium.thickness, settings.fresnel_boundaries,
                   time_axis.gate_start, time_axis.bin_width, n_bins,
                   settings.roulette_threshold, settings.roulette_survival,
                   g_origin, g_dims, g_pitch, record_j,
                   ov, has_overlay,
                   t_part, w2_part, j_part)
    t_sum = t_part.sum(axis=1)
    w2_sum = w2_part.sum(axis=1)
    j_sum = j_part.sum(axis=1) if record_j else None
    return t_sum, w2_sum, j_sum


def simulate_transients(medium: SlabMedium, scan: ScanConfig, settings: McSettings,
                        detector_aperture: float = 1.0, detect_face: str = "front",
                        mu_a_overlay: Optional[VolumeImage] = None,
                        return_stderr: bool = False):
    """Histogram detected photon weights per (source, detector, time bin).

    Values are per-launched-photon detection probabilities (divide-by-N
    normalized). `mu_a_overlay` adds voxel-wise extra absorption handled
    by exact pathlength attenuation, leaving photon paths untouched, so
    runs with the same seed are path-correlated with the baseline.
    """
    ensure_valid_scene(medium, mu_a_overlay.grid if mu_a_overlay else None, scan)
    if detect_face not in ("front", "back"):
        raise InvalidParameterError("detect_face must be 'front' or 'back'")
    src = scan.sources
    if scan.confocal:
        det = src[:, None, :]
    else:
        det = np.broadcast_to(scan.detectors[None, :, :],
                              (scan.n_sources, scan.n_detectors, 2)).copy()
    grid = mu_a_overlay.grid if mu_a_overlay is not None else None
    overlay = mu_a_overlay.values.ravel() if mu_a_overlay is not None else None
    t_sum, w2_sum, _ = _run_pairs(medium, src, det, scan.time_axis, settings,
                                  detector_aperture, detect_face == "back",
                                  grid=grid, overlay=overlay)
    n = float(settings.n_photons)
    values = t_sum / n
    if scan.confocal:
        values = values[:, 0, :]
    warnings = () if t_sum.sum() > 0 else ("zero photons detected",)
    result = TransientSet(values, scan, warnings)
    if not return_stderr:
        return result
    var = np.maximum(w2_sum - t_sum**2 / n, 0.0) / (n * n)
    se = np.sqrt(var)
    if scan.confocal:
        se = se[:, 0, :]
    return result, se


def estimate_jacobian_mc(medium: SlabMedium, scan: ScanConfig, grid: VoxelGrid,
                         settings: McSettings, detector_aperture: float = 1.0,
                         detector_subsets: Optional[np.ndarray] = None) -> DenseOperator:
    """Perturbation-MC absorption Jacobian, J[p, q] = dm_p / dmu_a(q) <= 0.

    Each detected photon contributes -w * pathlength(q) to its
    (source, detector, arrival-bin) row. `detector_subsets` (n_src, k)
    restricts each source to k detector indices (rows stay pair-major,
    time-minor); default is all detectors, or the collocated pair for
    confocal scans.
    """
    if not settings.record_jacobian:
        raise InvalidParameterError("estimate_jacobian_mc requires record_jacobian=True")
    ensure_valid_scene(medium, grid, scan)
    src = scan.sources
    n_bins = scan.time_axis.n_bins
    if scan.confocal and detector_subsets is None:
        det = src[:, None, :]
        src_idx = np.arange(scan.n_sources)
        det_idx = np.arange(scan.n_sources)
        rows = MeasurementIndex.pairs(src_idx, det_idx, scan.n_sources,
                                      scan.n_detectors, n_bins)
    elif detector_subsets is not None:
        subsets = np.asarray(detector_subsets, dtype=np.int64)
        det = scan.detectors[subsets]
        src_idx = np.repeat(np.arange(scan.n_sources), subsets.shape[1])
        det_idx = subsets.ravel()
        rows = MeasurementIndex.pairs(src_idx, det_idx, scan.n_sources,
                                      scan.n_detectors, n_bins)
    else:
        det = np.broadcast_to(scan.detectors[None, :, :],
                              (scan.n_sources, scan.n_detectors, 2)).copy()
        rows = MeasurementIndex.full(scan.n_sources, scan.n_detectors, n_bins)
    _, _, j_sum = _run_pairs(medium, src, det, scan.time_axis, settings,
                             detector_aperture, False, grid=grid, record_j=True)
    # j_sum: (n_src, n_det_local*n_bins, n_cols); row order matches
    # MeasurementIndex.pairs/full (source-major, detector, time-minor)
    mat = -(j_sum.reshape(-1, grid.n_voxels)) / float(settings.n_photons)
    return DenseOperator(mat, rows, grid)


def _uniform_depth_grid(depth_list, pitch, kernel_radius, src_position, voxel_depth):
    depth_list = np.asarray(depth_list, dtype=np.float64)
    if np.any(np.diff(depth_list) <= 0):
        raise InvalidParameterError("depth_list must be strictly increasing")
    if len(depth_list) > 1:
        spacing = np.diff(depth_list)
        if not np.allclose(spacing, spacing[0], atol=1e-9):
            raise InvalidParameterError("MC kernels need uniformly spaced depths")
        dz = float(spacing[0])
    else:
        dz = float(voxel_depth if voxel_depth is not None else pitch)
    K = 2 * int(kernel_radius) + 1
    sx, sy = src_position
    origin = (sx - K * pitch / 2.0, sy - K * pitch / 2.0, float(depth_list[0]) - dz / 2.0)
    return VoxelGrid((K, K, len(depth_list)), (pitch, pitch, dz), origin), dz


def estimate_psf_mc(medium: SlabMedium, depth_list, time_axis: TimeAxis,
                    settings: McSettings, kernel_radius: int, pitch: float,
                    detector_aperture: float = 1.0, src_position=(0.0, 0.0),
                    detector_offsets: Sequence = ((0.0, 0.0),),
                    voxel_depth: Optional[float] = None,
                    symmetrize: bool = False, radialize: bool = False):
    """Confocal blur kernel stack(s) via pathlength-recording MC.

    The kernel is the collocated measurement response to a unit point
    perturbation at each depth, centered on zero lateral offset (shape
    (2R+1, 2R+1, N_t) per depth, positive magnitude). Extra
    `detector_offsets` produce additional stacks for offset-pair
    geometries (e.g. a CW baseline with fixed separation); a list is
    returned when more than one offset is given.

    `symmetrize=True` averages the kernel over the 8-fold lateral
    symmetry group of the collocated geometry (exact variance reduction
    for a homogeneous slab with a square aperture; only valid for the
    zero-offset kernel). `radialize=True` goes further and averages over
    rings of equal lateral radius: exact for a circular aperture and an
    excellent approximation for a square one, and the only way to tame
    per-cell starvation for deep, finely-pitched kernels.
    """
    depth_list = np.asarray(depth_list, dtype=np.float64)
    if np.any(depth_list <= 0) or np.any(depth_list >= medium.thickness):
        raise InvalidParameterError("kernel depths must lie inside the slab")
    grid, _ = _uniform_depth_grid(depth_list, pitch, kernel_radius, src_position, voxel_depth)
    ensure_valid_scene(medium, grid)
    K = 2 * int(kernel_radius) + 1
    src = np.asarray([src_position], dtype=np.float64)
    offs = np.asarray(detector_offsets, dtype=np.float64).reshape(-1, 2)
    det = (src[0][None, :] + offs)[None, :, :]
    t_sum, _, j_sum = _run_pairs(medium, src, det, time_axis, settings,
                                 detector_aperture, False, grid=grid, record_j=True)
    n_bins = time_axis.n_bins
    nz = len(depth_list)
    stacks = []
    for oi in range(offs.shape[0]):
        block = j_sum[0, oi * n_bins:(oi + 1) * n_bins, :] / float(settings.n_photons)
        # rows: time bins; cols: C-order (x, y, z) -> (K, K, nz); want (nz, K, K, t)
        kern = block.T.reshape(K, K, nz, n_bins).transpose(2, 0, 1, 3)
        if symmetrize and np.allclose(offs[oi], 0.0):
            kern = (kern + kern[:, ::-1, :, :] + kern[:, :, ::-1, :] + kern[:, ::-1, ::-1, :])
            kern = (kern + kern.transpose(0, 2, 1, 3)) / 8.0
        if radialize and np.allclose(offs[oi], 0.0):
            kern = _ring_average(kern)
        stacks.append(KernelStack(np.ascontiguousarray(kern), depth_list, pitch, time_axis))
    return stacks[0] if offs.shape[0] == 1 else stacks


def _ring_average(kern: np.ndarray) -> np.ndarray:
    """Average kernel cells over rings of equal lateral radius (per depth, bin).

    Quantizes cell radii to half-pitch rings; preserves total mass exactly.
    """
    nz, K, _, n_t = kern.shape
    r = np.arange(K) - (K - 1) / 2.0
    rad = np.hypot(r[:, None], r[None, :])
    ring = np.round(rad * 2.0).astype(np.int64).ravel()
    n_rings = ring.max() + 1
    counts = np.bincount(ring, minlength=n_rings).astype(np.float64)
    flat = kern.reshape(nz, K * K, n_t)
    out = np.empty_like(flat)
    for zi in range(nz):
        sums = np.zeros((n_rings, n_t))
        np.add.at(sums, ring, flat[zi])
        out[zi] = sums[ring] / counts[ring, None]
    return out.reshape(nz, K, K, n_t)


def apply_fluorescence_lifetime(transient: TransientSet, lifetime_ns: float) -> TransientSet:
    """Causal convolution with the (1/tau) exp(-t/tau) lifetime kernel.

    The kernel is discretized by exact bin integration, so total counts
    are preserved up to truncation at the axis end.
    """
    if lifetime_ns <= 0:
        raise InvalidParameterError("lifetime must be > 0")
    axis = transient.scan.time_axis if transient.scan is not None else None
    n = transient.values.shape[-1]
    if axis is not None and axis.n_bins != n:
        raise InvalidParameterError("transient/time axis mismatch")
    bin_width = axis.bin_width if axis is not None else 1.0
    tau = lifetime_ns * 1000.0
    k = np.arange(n)
    pmf = np.exp(-k * bin_width / tau) * (1.0 - np.exp(-bin_width / tau))
    v = transient.values
    flat = v.reshape(-1, n)
    out = np.zeros_like(flat)
    for j in range(n):
        out[:, j:] += flat[:, : n - j] * pmf[j]
    return transient.with_values(out.reshape(v.shape))


def lifetime_pmf(time_axis: TimeAxis, lifetime_ns: float) -> np.ndarray:
    """Per-bin mass of the decay exponential on the given axis."""
    tau = lifetime_ns * 1000.0
    k = np.arange(time_axis.n_bins)
    return np.exp(-k * time_axis.bin_width / tau) * (1.0 - np.exp(-time_axis.bin_width / tau))


def visitation_fluence(medium: SlabMedium, positions: np.ndarray, grid: VoxelGrid,
                       time_axis: TimeAxis, settings: McSettings,
                       props=None) -> np.ndarray:
    """Time-resolved visitation fluence (n_pos, n_voxels, n_bins), per photon.

    Estimates sum(w * dl) per voxel and traversal-time bin for beams
    launched at each surface position; `props` overrides the medium's
    optical properties (used for the emission wavelength).
    """
    p = props or medium.props
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n_src = positions.shape[0]
    g_origin, g_dims, g_pitch = _grid_arrays(grid, n_src)
    n_cols = grid.n_voxels
    bytes_per_chunk = 8 * n_cols * time_axis.n_bins
    n_chunks = _n_chunks(settings.n_photons, n_src, bytes_per_chunk)
    f_part = np.zeros((n_src, n_chunks, n_cols, time_axis.n_bins))
    _k.trace_fluence(np.uint64(settings.seed), settings.n_photons, n_chunks,
                     np.ascontiguousarray(positions),
                     p.mu_s, p.mu_a, p.g, p.n, speed_in_medium(p),
                     medium.thickness, settings.fresnel_boundaries,
                     time_axis.gate_start, time_axis.bin_width, time_axis.n_bins,
                     settings.roulette_threshold, settings.roulette_survival,
                     g_origin, g_dims, g_pitch, f_part)
    return f_part.sum(axis=1) / float(settings.n_photons)


def _compose_fluorescence(excite: np.ndarray, emit: np.ndarray, pmf: np.ndarray) -> np.ndarray:
    """Per-voxel triple convolution (excitation) (*) (lifetime) (*) (escape)."""
    import scipy.fft
    n = excite.shape[-1]
    nfft = scipy.fft.next_fast_len(2 * n - 1)
    xh = scipy.fft.rfft(excite, nfft, axis=-1)
    eh = scipy.fft.rfft(emit, nfft, axis=-1)
    lh = scipy.fft.rfft(pmf, nfft)
    return scipy.fft.irfft(xh * eh * lh, nfft, axis=-1)[..., :n]


def estimate_fluorescence_jacobian_mc(medium: SlabMedium, scan: ScanConfig,
                                      grid: VoxelGrid, settings: McSettings) -> DenseOperator:
    """Fluorescence-mode sensitivity via two reciprocal MC passes.

    Row (s, d, t) and column q carry the time convolution of the
    excitation fluence at q (forward pass from source s), the lifetime
    exponential, and the emission escape function (reciprocal pass from
    detector d under the emission optical properties). Values are
    positive emission responses in relative yield units.
    """
    if medium.fluorescence is None:
        raise InvalidParameterError("medium has no fluorophore model")
    ensure_valid_scene(medium, grid, scan)
    fl = medium.fluorescence
    excite = visitation_fluence(medium, scan.sources, grid, scan.time_axis, settings)
    if scan.confocal and _same_props(fl.emission_props, medium.props):
        emit = excite
    else:
        emit_settings = McSettings(settings.n_photons, settings.seed + 1,
                                   settings.record_jacobian, settings.roulette_threshold,
                                   settings.roulette_survival, settings.fresnel_boundaries)
        emit = visitation_fluence(medium, scan.detectors, grid, scan.time_axis,
                                  emit_settings, props=fl.emission_props)
    pmf = lifetime_pmf(scan.time_axis, fl.lifetime_ns)
    n_bins = scan.time_axis.n_bins
    pairs = [(i, i) for i in range(scan.n_sources)] if scan.confocal else \
        [(s, d) for s in range(scan.n_sources) for d in range(scan.n_detectors)]
    mat = np.empty((len(pairs) * n_bins, grid.n_voxels))
    for p_idx, (si, di) in enumerate(pairs):
        conv = _compose_fluorescence(excite[si], emit[di], pmf)  # (n_vox, n_t)
        mat[p_idx * n_bins:(p_idx + 1) * n_bins] = conv.T
    if scan.confocal:
        rows = MeasurementIndex.pairs(np.arange(scan.n_sources), np.arange(scan.n_sources),
                                      scan.n_sources, scan.n_detectors, n_bins)
    else:
        rows = MeasurementIndex.full(scan.n_sources, scan.n_detectors, n_bins)
    return DenseOperator(mat, rows, grid)


def estimate_fluorescence_psf_mc(medium: SlabMedium, depth_list, time_axis: TimeAxis,
                                 settings: McSettings, kernel_radius: int, pitch: float,
                                 voxel_depth: Optional[float] = None) -> KernelStack:
    """Confocal fluorescence kernel stack from the two-pass composition."""
    if medium.fluorescence is None:
        raise InvalidParameterError("medium has no fluorophore model")
    fl = medium.fluorescence
    grid, _ = _uniform_depth_grid(np.asarray(depth_list, dtype=np.float64), pitch,
                                  kernel_radius, (0.0, 0.0), voxel_depth)
    pos = np.asarray([[0.0, 0.0]])
    excite = visitation_fluence(medium, pos, grid, time_axis, settings)
    if _same_props(fl.emission_props, medium.props):
        emit = excite
    else:
        emit_settings = McSettings(settings.n_photons, settings.seed + 1,
                                   settings.record_jacobian, settings.roulette_threshold,
                                   settings.roulette_survival, settings.fresnel_boundaries)
        emit = visitation_fluence(medium, pos, grid, time_axis, emit_settings,
                                  props=fl.emission_props)
    pmf = lifetime_pmf(time_axis, fl.lifetime_ns)
    conv = _compose_fluorescence(excite[0], emit[0], pmf)  # (n_vox, n_t)
    K = 2 * int(kernel_radius) + 1
    nz = len(np.atleast_1d(depth_list))
    kern = conv.reshape(K, K, nz, time_axis.n_bins).transpose(2, 0, 1, 3)
    return KernelStack(np.ascontiguousarray(kern), np.atleast_1d(depth_list), pitch, time_axis)


def _same_props(a, b) -> bool:
    return (a.mu_s == b.mu_s and a.mu_a == b.mu_a and a.g == b.g and a.n == b.n)


def trace_photons(medium: SlabMedium, src_position, settings: McSettings,
                  t_max: float, detect_face: str = "front",
                  max_records: int = 1000) -> list[PhotonRecord]:
    """Individual detected-photon records (sequential; for tests/debugging)."""
    out_xy = np.zeros((max_records, 2))
    out_t = np.zeros(max_records)
    out_w = np.zeros(max_records)
    out_path = np.zeros(max_records)
    p = medium.props
    n = _k.trace_records(np.uint64(settings.seed), settings.n_photons,
                         float(src_position[0]), float(src_position[1]),
                         p.mu_s, p.mu_a, p.g, p.n, speed_in_medium(p),
                         medium.thickness, settings.fresnel_boundaries,
                         t_max, settings.roulette_threshold, settings.roulette_survival,
                         detect_face == "back", max_records,
                         out_xy, out_t, out_w, out_path)
    return [PhotonRecord((out_xy[i, 0], out_xy[i, 1]), out_t[i], out_w[i], out_path[i])
            for i in range(n)]
