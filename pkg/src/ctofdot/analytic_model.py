"""Closed-form diffusion-approximation forward quantities for a slab.

Time-domain fluence and diffuse reflectance come from the image-source
expansion of the diffusion Green's function between extrapolated
boundaries at z = -z_b and z = thickness + z_b; reflectance is the Fick
flux (normal derivative) at the entry face. A pencil beam is reduced to
an isotropic point source at depth z0 = 1/mu_s'.

Conventions: time-domain values are densities (mm^-2 ps^-1); Jacobian
assembly converts them to per-bin, per-voxel weights by multiplying with
the bin width (once per convolution integral, once for bin integration
of the measurement) and the voxel volume, so dense operators compose
directly with histogram-style measurements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .core_types import (ScanConfig, SlabMedium, TimeAxis, VoxelGrid,
                         ensure_valid_scene, speed_in_medium)
from .forward_ops import DenseOperator, KernelStack, MeasurementIndex

_FOUR_PI = 4.0 * np.pi


def effective_reflection_coefficient(n: float) -> float:
    """Internal reflection parameter R_eff for relative index n (1 => matched)."""
    if abs(n - 1.0) < 1e-12:
        return 0.0
    return -1.440 / n**2 + 0.710 / n + 0.668 + 0.0636 * n


@dataclass(frozen=True)
class DiffusionParams:
    """Derived diffusion quantities for one medium."""

    D: float  # diffusion coefficient, mm
    mu_eff: float  # effective attenuation, mm^-1
    v: float  # speed in medium, mm/ps
    z_b: float  # extrapolated boundary distance, mm
    z0: float  # isotropic-source depth, mm

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError("D must be > 0")
        if self.z_b < 0:
            raise ValueError("z_b must be >= 0")

    @property
    def mu_a(self) -> float:
        return self.D * self.mu_eff**2

    @classmethod
    def from_medium(cls, medium: SlabMedium, matched_boundary: bool = False,
                    absorption_in_d: bool = True) -> "DiffusionParams":
        """Standard construction from slab optical properties.

        `absorption_in_d=False` drops mu_a from the diffusion coefficient,
        which makes the absorption-scaling identity
        Q(mu_a) = Q(0) exp(-mu_a v t) exact rather than approximate.
        """
        p = medium.props
        musp = p.mu_s_reduced
        if musp <= 0:
            raise ValueError("diffusion approximation needs mu_s' > 0")
        D = 1.0 / (3.0 * ((p.mu_a if absorption_in_d else 0.0) + musp))
        mu_eff = np.sqrt(p.mu_a / D)
        r_eff = 0.0 if matched_boundary else effective_reflection_coefficient(p.n)
        z_b = 2.0 * D * (1.0 + r_eff) / (1.0 - r_eff)
        return cls(D=D, mu_eff=mu_eff, v=speed_in_medium(p), z_b=z_b, z0=1.0 / musp)


def _image_depths(z_src, thickness: float, z_b: float, order: int):
    """Image-source depths; broadcasts over array-valued emitter depth."""
    m = np.arange(-order, order + 1, dtype=np.float64)
    period = 2.0 * (thickness + 2.0 * z_b)
    z_src = np.asarray(z_src, dtype=np.float64)[..., None]
    z_plus = m * period + z_src
    z_minus = m * period - 2.0 * z_b - z_src
    return z_plus, z_minus


def _as_xy(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return r[..., :2]


def _point_depth(r):
    r = np.asarray(r, dtype=np.float64)
    return r[..., 2] if r.shape[-1] > 2 else np.zeros(r.shape[:-1])


def _fluence_series(rho2, z, z_src, t, p: DiffusionParams, thickness, r_min, order):
    """Fluence rate at depth(s) z from emitter at depth(s) z_src; broadcasts."""
    rho2, z, z_src, t = np.broadcast_arrays(
        np.asarray(rho2, dtype=np.float64), np.asarray(z, dtype=np.float64),
        np.asarray(z_src, dtype=np.float64), np.asarray(t, dtype=np.float64))
    zp, zm = _image_depths(z_src, thickness, p.z_b, order)
    tt = np.where(t > 0, t, 1.0)
    s = (4.0 * p.D * p.v * tt)[..., None]  # mm^2
    amp = p.v * (np.pi * s[..., 0]) ** -1.5 * np.exp(-p.mu_a * p.v * tt)
    rmin2 = r_min * r_min
    r2p = np.maximum(rho2[..., None] + (z[..., None] - zp) ** 2, rmin2)
    r2m = np.maximum(rho2[..., None] + (z[..., None] - zm) ** 2, rmin2)
    series = (np.exp(-r2p / s) - np.exp(-r2m / s)).sum(axis=-1)
    out = np.maximum(amp * series, 0.0)
    return np.where(t > 0, out, 0.0)


def _reflectance_series(rho2, z_src, t, p: DiffusionParams, thickness, r_min, order):
    """Fick flux at the entry face from emitter at depth(s) z_src; broadcasts."""
    rho2, z_src, t = np.broadcast_arrays(
        np.asarray(rho2, dtype=np.float64), np.asarray(z_src, dtype=np.float64),
        np.asarray(t, dtype=np.float64))
    zp, zm = _image_depths(z_src, thickness, p.z_b, order)
    tt = np.where(t > 0, t, 1.0)
    s = (4.0 * p.D * p.v * tt)[..., None]
    amp = 0.5 * (_FOUR_PI * p.D * p.v) ** -1.5 * tt ** -2.5 * np.exp(-p.mu_a * p.v * tt)
    rmin2 = r_min * r_min
    r2p = np.maximum(rho2[..., None] + zp**2, rmin2)
    r2m = np.maximum(rho2[..., None] + zm**2, rmin2)
    series = (zp * np.exp(-r2p / s) - zm * np.exp(-r2m / s)).sum(axis=-1)
    out = np.maximum(amp * series, 0.0)
    return np.where(t > 0, out, 0.0)


def fluence_infinite(r, t, params: DiffusionParams):
    """Infinite-medium Green's function fluence rate at distance r, mm^-2 ps^-1.

    The single-image building block of the slab expansion; its peak time
    is r^2 / (6 D v) when mu_a = 0.
    """
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = np.where(t > 0, t, 1.0)
    s = 4.0 * params.D * params.v * tt
    out = params.v * (np.pi * s) ** -1.5 * np.exp(-params.mu_a * params.v * tt - r**2 / s)
    return np.where(t > 0, out, 0.0)


def fluence_td(r_src, r_pt, t, params: DiffusionParams, slab: SlabMedium,
               r_min: float = 0.0, order: int = 7):
    """Slab Green's function fluence rate at interior point(s), mm^-2 ps^-1.

    `r_src` is the surface entry point (the physical pencil beam reduces
    to an isotropic point at depth z0 below it); `r_pt` = (x, y, z). `t`
    may be an array; values at t <= 0 are exactly zero (causality).
    """
    dxy = _as_xy(r_pt) - _as_xy(r_src)
    rho2 = np.sum(dxy * dxy, axis=-1)
    z = _point_depth(r_pt)
    return _fluence_series(rho2, z, params.z0, t, params, slab.thickness, r_min, order)


def reflectance_td(r_det, r_pt, t, params: DiffusionParams, slab: SlabMedium,
                   r_min: float = 0.0, order: int = 7):
    """Diffuse reflectance (Fick boundary flux) at the entry face, mm^-2 ps^-1.

    `r_pt` = (x, y, z) is an interior isotropic emitter (a voxel, or the
    reduced source at depth z0); `r_det` is the surface detection point.
    """
    dxy = _as_xy(r_pt) - _as_xy(r_det)
    rho2 = np.sum(dxy * dxy, axis=-1)
    z = _point_depth(r_pt)
    return _reflectance_series(rho2, z, t, params, slab.thickness, r_min, order)


def fluence_cw(rho2, z, params: DiffusionParams, thickness, r_min=0.0, order=7):
    """Time-integrated slab fluence (the CW Green's function); broadcasts."""
    rho2, z = np.broadcast_arrays(np.asarray(rho2, dtype=np.float64),
                                  np.asarray(z, dtype=np.float64))
    zp, zm = _image_depths(params.z0, thickness, params.z_b, order)
    rp = np.sqrt(np.maximum(rho2[..., None] + (z[..., None] - zp) ** 2, r_min**2))
    rm = np.sqrt(np.maximum(rho2[..., None] + (z[..., None] - zm) ** 2, r_min**2))
    out = (np.exp(-params.mu_eff * rp) / rp - np.exp(-params.mu_eff * rm) / rm)
    return np.maximum(out.sum(axis=-1) / (_FOUR_PI * params.D), 0.0)


def reflectance_cw(rho2, z_src, params: DiffusionParams, thickness, r_min=0.0, order=7):
    """Time-integrated Fick reflectance from interior emitter(s); broadcasts."""
    rho2, z_src = np.broadcast_arrays(np.asarray(rho2, dtype=np.float64),
                                      np.asarray(z_src, dtype=np.float64))
    zp, zm = _image_depths(z_src, thickness, params.z_b, order)
    rp = np.sqrt(np.maximum(rho2[..., None] + zp**2, r_min**2))
    rm = np.sqrt(np.maximum(rho2[..., None] + zm**2, r_min**2))
    mu = params.mu_eff
    tp = zp * (mu + 1.0 / rp) * np.exp(-mu * rp) / rp**2
    tm = zm * (mu + 1.0 / rm) * np.exp(-mu * rm) / rm**2
    return np.maximum((tp - tm).sum(axis=-1) / _FOUR_PI, 0.0)


def causal_conv(a: np.ndarray, b: np.ndarray, method: str = "auto") -> np.ndarray:
    """Causal 1D convolution along the last axis, truncated to its length.

    `auto` picks direct summation for short axes (<= 128 bins) and the
    frequency domain otherwise; both agree to ~1e-15 relative.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[-1]
    if b.shape[-1] != n:
        raise ValueError("operands must share the time axis length")
    if method == "auto":
        method = "direct" if n <= 128 else "fft"
    if method == "direct":
        out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        for k in range(n):
            out[..., k:] += a[..., :n - k] * b[..., k:k + 1]
        return out
    nfft = scipy.fft.next_fast_len(2 * n - 1)
    ah = scipy.fft.rfft(a, nfft, axis=-1)
    bh = scipy.fft.rfft(b, nfft, axis=-1)
    return scipy.fft.irfft(ah * bh, nfft, axis=-1)[..., :n]


def _pair_list(scan: ScanConfig):
    if scan.confocal:
        return [(i, i) for i in range(scan.n_sources)]
    return [(s, d) for s in range(scan.n_sources) for d in range(scan.n_detectors)]


def jacobian_cw(scan: ScanConfig, grid: VoxelGrid, params: DiffusionParams,
                slab: SlabMedium, order: int = 7) -> DenseOperator:
    """Continuous-wave Born Jacobian: J = Phi0(r_v - r_s) R(r_d - r_v) V_vox."""
    ensure_valid_scene(slab, grid, scan)
    c = grid.centers().reshape(-1, 3)
    vxy, vz = c[:, :2], c[:, 2]
    r_min = min(grid.pitch[:2]) / 2.0
    vol = float(np.prod(grid.pitch))
    pairs = _pair_list(scan)
    flu: dict[int, np.ndarray] = {}
    refl: dict[int, np.ndarray] = {}
    mat = np.empty((len(pairs), grid.n_voxels))
    for row, (si, di) in enumerate(pairs):
        if si not in flu:
            rho2 = np.sum((vxy - scan.sources[si]) ** 2, axis=1)
            flu[si] = fluence_cw(rho2, vz, params, slab.thickness, r_min, order)
        if di not in refl:
            rho2 = np.sum((vxy - scan.detectors[di]) ** 2, axis=1)
            refl[di] = reflectance_cw(rho2, vz, params, slab.thickness, r_min, order)
        mat[row] = flu[si] * refl[di] * vol
    if scan.confocal:
        rows = MeasurementIndex.pairs(np.arange(scan.n_sources), np.arange(scan.n_sources),
                                      scan.n_sources, scan.n_detectors, 1)
    else:
        rows = MeasurementIndex.full(scan.n_sources, scan.n_detectors, 1)
    return DenseOperator(mat, rows, grid)


def _fine_centers(time_axis: TimeAxis, oversample: int) -> np.ndarray:
    n = time_axis.n_bins * oversample
    w = time_axis.bin_width / oversample
    return time_axis.gate_start + (np.arange(n) + 0.5) * w


def _fluence_block(src_xy, vxy, vz, time_axis, params, slab, r_min, order,
                   oversample=1):
    """Per-voxel fluence histograms (N_vox, N_t*os): density x fine width."""
    rho2 = np.sum((vxy - src_xy) ** 2, axis=1)
    tc = _fine_centers(time_axis, oversample)
    w = time_axis.bin_width / oversample
    return _fluence_series(rho2[:, None], vz[:, None], params.z0, tc[None, :],
                           params, slab.thickness, r_min, order) * w


def _reflectance_block(det_xy, vxy, vz, time_axis, params, slab, r_min, order,
                       oversample=1):
    rho2 = np.sum((vxy - det_xy) ** 2, axis=1)
    tc = _fine_centers(time_axis, oversample)
    w = time_axis.bin_width / oversample
    return _reflectance_series(rho2[:, None], vz[:, None], tc[None, :],
                               params, slab.thickness, r_min, order) * w


def _aggregate_bins(fine: np.ndarray, oversample: int) -> np.ndarray:
    if oversample == 1:
        return fine
    return fine.reshape(fine.shape[:-1] + (-1, oversample)).sum(axis=-1)


def jacobian_td(scan: ScanConfig, grid: VoxelGrid, time_axis: TimeAxis,
                params: DiffusionParams, slab: SlabMedium, order: int = 7,
                oversample: int = 1) -> DenseOperator:
    """Time-domain Born Jacobian: per-voxel causal convolution Phi (*) R.

    Rows are pair-major, time-minor. Per-voxel time series are convolved
    in the frequency domain, with transforms cached per unique source and
    detector index so all-pairs scans reuse them. `oversample` evaluates
    the Green's functions on a finer internal time grid before bin
    aggregation (needed when bins are coarse against the transient rise).
    """
    ensure_valid_scene(slab, grid, scan)
    c = grid.centers().reshape(-1, 3)
    vxy, vz = c[:, :2], c[:, 2]
    r_min = min(grid.pitch[:2]) / 2.0
    vol = float(np.prod(grid.pitch))
    n_t = time_axis.n_bins
    n_f = n_t * oversample
    nfft = scipy.fft.next_fast_len(2 * n_f - 1)
    pairs = _pair_list(scan)
    flu_hat: dict[int, np.ndarray] = {}
    refl_hat: dict[int, np.ndarray] = {}
    mat = np.empty((len(pairs) * n_t, grid.n_voxels))
    for p_idx, (si, di) in enumerate(pairs):
        if si not in flu_hat:
            blk = _fluence_block(scan.sources[si], vxy, vz, time_axis, params,
                                 slab, r_min, order, oversample)
            flu_hat[si] = scipy.fft.rfft(blk, nfft, axis=-1)
        if di not in refl_hat:
            blk = _reflectance_block(scan.detectors[di], vxy, vz, time_axis,
                                     params, slab, r_min, order, oversample)
            refl_hat[di] = scipy.fft.rfft(blk, nfft, axis=-1)
        conv = scipy.fft.irfft(flu_hat[si] * refl_hat[di], nfft, axis=-1)[:, :n_f]
        mat[p_idx * n_t:(p_idx + 1) * n_t] = _aggregate_bins(conv, oversample).T * vol
    if scan.confocal:
        rows = MeasurementIndex.pairs(np.arange(scan.n_sources), np.arange(scan.n_sources),
                                      scan.n_sources, scan.n_detectors, n_t)
    else:
        rows = MeasurementIndex.full(scan.n_sources, scan.n_detectors, n_t)
    return DenseOperator(mat, rows, grid)


def psf_analytic(depth_list, time_axis: TimeAxis, params: DiffusionParams,
                 slab: SlabMedium, kernel_radius: int, pitch: float,
                 voxel_depth: float | None = None, order: int = 7,
                 oversample: int = 4) -> KernelStack:
    """Confocal blur kernel stack from the diffusion model.

    The kernel at depth z is the collocated-pair response to a unit
    perturbation of the voxel at lateral offset (dx, dy): the same
    Phi (*) R construction as jacobian_td, sampled on a (2R+1)^2 offset
    grid centered on the scan position.
    """
    depth_list = np.asarray(depth_list, dtype=np.float64)
    if np.any(depth_list <= 0) or np.any(depth_list >= slab.thickness):
        raise ValueError("kernel depths must lie strictly inside the slab")
    K = 2 * int(kernel_radius) + 1
    dz = pitch if voxel_depth is None else voxel_depth
    vol = pitch * pitch * dz
    offsets = (np.arange(K) - kernel_radius) * pitch
    ox, oy = np.meshgrid(offsets, offsets, indexing="ij")
    rho2 = (ox**2 + oy**2).ravel()
    r_min = pitch / 2.0
    tc = _fine_centers(time_axis, oversample)
    w = time_axis.bin_width / oversample
    n_t = time_axis.n_bins
    n_f = n_t * oversample
    nfft = scipy.fft.next_fast_len(2 * n_f - 1)
    kernels = np.empty((len(depth_list), K, K, n_t))
    for zi, z in enumerate(depth_list):
        phi = _fluence_series(rho2[:, None], z, params.z0, tc[None, :],
                              params, slab.thickness, r_min, order) * w
        refl = _reflectance_series(rho2[:, None], z, tc[None, :],
                                   params, slab.thickness, r_min, order) * w
        conv = scipy.fft.irfft(scipy.fft.rfft(phi, nfft, axis=-1) * scipy.fft.rfft(refl, nfft, axis=-1),
                               nfft, axis=-1)[:, :n_f]
        kernels[zi] = (_aggregate_bins(conv, oversample) * vol).reshape(K, K, n_t)
    return KernelStack(kernels, depth_list, pitch, time_axis)
