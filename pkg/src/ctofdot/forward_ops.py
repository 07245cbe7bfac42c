"""Linear forward operators for ToF-DOT measurement models.

Two interchangeable representations of the sensitivity operator are
provided: an explicit dense matrix over (source, detector, time-bin) rows,
and a depth-stacked convolutional kernel for confocal scans. Both expose
`apply` / `adjoint` so the inverse solver is agnostic to which is used.
Convolutions are linear (zero-padded), not circular: wraparound would be
unphysical, and scan positions whose kernel support leaves the grid are
flagged via `boundary_mask`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft
import scipy.linalg

from .core_types import ScanConfig, TimeAxis, TransientSet, VolumeImage, VoxelGrid


class DimensionMismatchError(ValueError):
    pass


class PitchMismatchError(ValueError):
    pass


class MissingRowsError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementIndex:
    """Maps matrix rows to (source, detector, time-bin) triples."""

    src: np.ndarray
    det: np.ndarray
    tbin: np.ndarray
    n_sources: int
    n_detectors: int
    n_bins: int
    layout: str  # "full" | "pairs"

    def __post_init__(self):
        for name in ("src", "det", "tbin"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not (len(self.src) == len(self.det) == len(self.tbin)):
            raise ValueError("index arrays must have equal length")

    def __len__(self):
        return len(self.src)

    @classmethod
    def full(cls, n_sources: int, n_detectors: int, n_bins: int) -> "MeasurementIndex":
        s, d, t = np.meshgrid(np.arange(n_sources), np.arange(n_detectors),
                              np.arange(n_bins), indexing="ij")
        return cls(s.ravel(), d.ravel(), t.ravel(), n_sources, n_detectors, n_bins, "full")

    @classmethod
    def pairs(cls, src, det, n_sources: int, n_detectors: int, n_bins: int) -> "MeasurementIndex":
        src = np.asarray(src, dtype=np.int64)
        det = np.asarray(det, dtype=np.int64)
        s = np.repeat(src, n_bins)
        d = np.repeat(det, n_bins)
        t = np.tile(np.arange(n_bins), len(src))
        return cls(s, d, t, n_sources, n_detectors, n_bins, "pairs")

    @property
    def n_pairs(self) -> int:
        return len(self.src) // self.n_bins


@dataclass(frozen=True)
class DenseOperator:
    """Explicit sensitivity matrix m = J mu.

    Rows follow `rows` (pair-major, time-minor); columns follow the
    row-major raveling of the voxel grid.
    """

    matrix: np.ndarray
    rows: MeasurementIndex
    grid: VoxelGrid

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2:
            raise ValueError("matrix must be 2D")
        if m.shape[0] != len(self.rows):
            raise DimensionMismatchError(f"matrix has {m.shape[0]} rows, index has {len(self.rows)}")
        if m.shape[1] != self.grid.n_voxels:
            raise DimensionMismatchError(f"matrix has {m.shape[1]} cols, grid has {self.grid.n_voxels} voxels")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix entries must be finite")

    @property
    def vol_shape(self):
        return tuple(self.grid.dims)

    @property
    def meas_shape(self):
        r = self.rows
        if r.layout == "full":
            return (r.n_sources, r.n_detectors, r.n_bins)
        return (r.n_pairs, r.n_bins)

    def apply(self, vol: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(vol).ravel()).reshape(self.meas_shape)

    def adjoint(self, meas: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ np.asarray(meas).ravel()).reshape(self.vol_shape)


def apply_dense(op: DenseOperator, mu) -> TransientSet:
    """Exact matrix-vector forward model, reshaped to measurement axes."""
    vol = mu.values if isinstance(mu, VolumeImage) else np.asarray(mu)
    if vol.size != op.matrix.shape[1]:
        raise DimensionMismatchError(f"volume has {vol.size} voxels, operator expects {op.matrix.shape[1]}")
    return TransientSet(op.apply(vol), signed=True)


def apply_dense_adjoint(op: DenseOperator, m) -> VolumeImage:
    meas = m.values if isinstance(m, TransientSet) else np.asarray(m)
    if meas.size != op.matrix.shape[0]:
        raise DimensionMismatchError(f"measurement has {meas.size} entries, operator expects {op.matrix.shape[0]}")
    return VolumeImage(op.adjoint(meas), op.grid)


def extract_confocal(op: DenseOperator, scan: ScanConfig) -> DenseOperator:
    """Restrict a full-scan operator to its collocated (diagonal) pairs."""
    r = op.rows
    # Which (source, detector) index pairs are collocated under `scan`.
    diag = []
    for si in range(scan.n_sources):
        matches = np.where(np.all(np.isclose(scan.detectors, scan.sources[si], atol=1e-9), axis=1))[0]
        if len(matches):
            diag.append((si, int(matches[0])))
    if not diag:
        raise MissingRowsError("scan defines no collocated source/detector pairs")
    keep = []
    for si, di in diag:
        rows_sd = np.where((r.src == si) & (r.det == di))[0]
        if len(rows_sd) != r.n_bins:
            raise MissingRowsError(f"operator lacks rows for collocated pair ({si}, {di})")
        keep.append(rows_sd[np.argsort(r.tbin[rows_sd])])
    keep = np.concatenate(keep)
    new_rows = MeasurementIndex.pairs([s for s, _ in diag], [d for _, d in diag],
                                      r.n_sources, r.n_detectors, r.n_bins)
    return DenseOperator(op.matrix[keep], new_rows, op.grid)


def collapse_time(op: DenseOperator) -> DenseOperator:
    """Sum rows over time bins: the continuous-wave version of an operator."""
    r = op.rows
    n_pairs = len(r) // r.n_bins
    mat = op.matrix.reshape(n_pairs, r.n_bins, -1).sum(axis=1)
    if r.layout == "full":
        rows = MeasurementIndex.full(r.n_sources, r.n_detectors, 1)
    else:
        rows = MeasurementIndex.pairs(r.src[::r.n_bins], r.det[::r.n_bins],
                                      r.n_sources, r.n_detectors, 1)
    return DenseOperator(mat, rows, op.grid)


@dataclass(frozen=True)
class KernelStack:
    """Depth-stacked confocal blur kernels rho_z(x, y, t).

    `kernels` has shape (n_depths, K, K, N_t) with K odd so the kernel is
    centered on zero lateral offset; `depth_list` must be strictly
    increasing.
    """

    kernels: np.ndarray
    depth_list: np.ndarray
    pitch: float
    time_axis: TimeAxis

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        d = np.asarray(self.depth_list, dtype=np.float64)
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "depth_list", d)
        if k.ndim != 4 or k.shape[1] != k.shape[2]:
            raise ValueError("kernels must have shape (n_depths, K, K, N_t)")
        if k.shape[1] % 2 != 1:
            raise ValueError("kernel size K must be odd")
        if k.shape[0] != len(d):
            raise ValueError("kernel count must match depth_list")
        if len(d) > 1 and not np.all(np.diff(d) > 0):
            raise ValueError("depth_list must be strictly increasing")
        if k.shape[3] != self.time_axis.n_bins:
            raise ValueError("kernel time axis must match time_axis.n_bins")

    @property
    def radius(self) -> int:
        return (self.kernels.shape[1] - 1) // 2

    @property
    def n_depths(self) -> int:
        return self.kernels.shape[0]

    def depth_mass(self) -> np.ndarray:
        """Total kernel mass per depth (used for layer-wise regularization)."""
        return np.abs(self.kernels).sum(axis=(1, 2, 3))


def _check_conv_geometry(kernels: KernelStack, grid: VoxelGrid) -> None:
    px, py, _ = grid.pitch
    if abs(px - kernels.pitch) > 1e-9 or abs(py - kernels.pitch) > 1e-9:
        raise PitchMismatchError(f"grid pitch ({px}, {py}) != kernel pitch {kernels.pitch}")
    if grid.dims[2] != kernels.n_depths:
        raise PitchMismatchError(f"grid has {grid.dims[2]} depth layers, kernel stack has {kernels.n_depths}")
    zc = grid.depth_centers
    if not np.allclose(zc, kernels.depth_list, atol=1e-6):
        raise PitchMismatchError(f"grid depth centers {zc} misaligned with kernel depths {kernels.depth_list}")


class ConvOperator:
    """FFT-backed confocal forward model m(x,y,t) = sum_z rho_z * mu_z.

    Caches the padded kernel transforms; `apply`/`adjoint` are pure and
    safe to call concurrently.
    """

    def __init__(self, kernels: KernelStack, grid: VoxelGrid):
        _check_conv_geometry(kernels, grid)
        self.kernels = kernels
        self.grid = grid
        L, W, H = grid.dims
        K = kernels.kernels.shape[1]
        self._L, self._W, self._K = L, W, K
        self._R = (K - 1) // 2
        self._P = scipy.fft.next_fast_len(L + K - 1)
        self._Q = scipy.fft.next_fast_len(W + K - 1)
        pad = np.zeros((kernels.n_depths, kernels.time_axis.n_bins, self._P, self._Q))
        # (depth, t, x, y) layout so the batched FFT runs over the last two axes
        pad[:, :, :K, :K] = np.transpose(kernels.kernels, (0, 3, 1, 2))
        self._khat = scipy.fft.rfft2(pad, axes=(-2, -1))

    @property
    def vol_shape(self):
        return tuple(self.grid.dims)

    @property
    def meas_shape(self):
        return (self._L * self._W, self.kernels.time_axis.n_bins)

    def boundary_mask(self) -> np.ndarray:
        """(L, W) flags for scan positions whose kernel support leaves the grid."""
        L, W, R = self._L, self._W, self._R
        mask = np.ones((L, W), dtype=bool)
        if L > 2 * R and W > 2 * R:
            mask[R:L - R, R:W - R] = False
        return mask

    def apply(self, vol: np.ndarray) -> np.ndarray:
        vol = np.asarray(vol, dtype=np.float64).reshape(self.vol_shape)
        L, W, R = self._L, self._W, self._R
        pad = np.zeros((self.vol_shape[2], self._P, self._Q))
        pad[:, :L, :W] = np.transpose(vol, (2, 0, 1))
        vhat = scipy.fft.rfft2(pad, axes=(-2, -1))
        prod = (self._khat * vhat[:, None, :, :]).sum(axis=0)
        full = scipy.fft.irfft2(prod, s=(self._P, self._Q), axes=(-2, -1))
        same = full[:, R:R + L, R:R + W]
        return np.transpose(same, (1, 2, 0)).reshape(self.meas_shape)

    def adjoint(self, meas: np.ndarray) -> np.ndarray:
        L, W, R = self._L, self._W, self._R
        m = np.asarray(meas, dtype=np.float64).reshape(L, W, -1)
        pad = np.zeros((m.shape[2], self._P, self._Q))
        pad[:, R:R + L, R:R + W] = np.transpose(m, (2, 0, 1))
        mhat = scipy.fft.rfft2(pad, axes=(-2, -1))
        prod = (np.conj(self._khat) * mhat[None, :, :, :]).sum(axis=1)
        g = scipy.fft.irfft2(prod, s=(self._P, self._Q), axes=(-2, -1))
        return np.transpose(g[:, :L, :W], (1, 2, 0))

    def to_dense(self) -> DenseOperator:
        """Materialize as a DenseOperator with shifted-kernel rows (oracle path)."""
        L, W, H = self.vol_shape
        T = self.kernels.time_axis.n_bins
        K, R = self._K, self._R
        kern = self.kernels.kernels  # (H, K, K, T)
        mat = np.zeros((L * W * T, L * W * H))
        for p in range(L):
            for q in range(W):
                base = (p * W + q) * T
                for a in range(K):
                    i = p + R - a
                    if not 0 <= i < L:
                        continue
                    for b in range(K):
                        j = q + R - b
                        if not 0 <= j < W:
                            continue
                        col0 = (i * W + j) * H
                        for z in range(H):
                            mat[base:base + T, col0 + z] = kern[z, a, b, :]
        rows = MeasurementIndex.pairs(np.arange(L * W), np.arange(L * W), L * W, L * W, T)
        return DenseOperator(mat, rows, self.grid)


def apply_conv(kernels: KernelStack, mu: VolumeImage, scan: Optional[ScanConfig] = None) -> TransientSet:
    """Confocal convolutional forward model evaluated on the grid raster."""
    op = ConvOperator(kernels, mu.grid)
    if scan is not None:
        _check_scan_congruence(scan, mu.grid)
    return TransientSet(op.apply(mu.values), scan, signed=True)


def apply_conv_adjoint(kernels: KernelStack, m, grid: VoxelGrid) -> VolumeImage:
    op = ConvOperator(kernels, grid)
    meas = m.values if isinstance(m, TransientSet) else np.asarray(m)
    return VolumeImage(op.adjoint(meas), grid)


def _check_scan_congruence(scan: ScanConfig, grid: VoxelGrid) -> None:
    if not scan.confocal:
        raise PitchMismatchError("convolutional model requires a confocal scan")
    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    expect = np.column_stack([gx.ravel(), gy.ravel()])
    if scan.sources.shape != expect.shape or not np.allclose(scan.sources, expect, atol=1e-6):
        raise PitchMismatchError("scan positions are not congruent with the voxel raster")


SCHEMES = ("identity", "hadamard01", "hadamard_pm", "far_field_groups")


@dataclass(frozen=True)
class MultiplexMatrix:
    """Illumination pattern matrix S applied to the source dimension."""

    S: np.ndarray
    scheme: str

    def __post_init__(self):
        object.__setattr__(self, "S", np.asarray(self.S, dtype=np.float64))
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.S.ndim != 2:
            raise ValueError("S must be a matrix")

    @property
    def n_patterns(self) -> int:
        return self.S.shape[0]

    @property
    def n_sources(self) -> int:
        return self.S.shape[1]


def build_multiplex(scheme: str, n_sources: int, min_separation: float = 0.0,
                    scan: Optional[ScanConfig] = None) -> MultiplexMatrix:
    """Construct an illumination pattern matrix.

    hadamard01 uses the (H+1)/2 on/off form (nonnegative light levels);
    hadamard_pm is the +-1 form for differential two-capture emulation;
    far_field_groups needs `scan` and partitions sources so simultaneously
    active ones are at least `min_separation` apart.
    """
    if scheme == "identity":
        return MultiplexMatrix(np.eye(n_sources), "identity")
    if scheme in ("hadamard01", "hadamard_pm"):
        if n_sources < 1 or (n_sources & (n_sources - 1)) != 0:
            raise ValueError(f"no Hadamard construction available for n={n_sources} (need a power of 2)")
        H = scipy.linalg.hadamard(n_sources).astype(np.float64)
        return MultiplexMatrix(H if scheme == "hadamard_pm" else (H + 1.0) / 2.0, scheme)
    if scheme == "far_field_groups":
        if scan is None:
            raise ValueError("far_field_groups requires the scan layout")
        if min_separation <= 0:
            raise ValueError("far_field_groups requires min_separation > 0")
        pos = scan.sources
        if pos.shape[0] != n_sources:
            raise ValueError("scan source count does not match n_sources")
        groups = _lattice_groups(pos, min_separation)
        if groups is None:
            groups = _greedy_groups(pos, min_separation)
        rows = np.zeros((len(groups), n_sources))
        for gi, group in enumerate(groups):
            rows[gi, group] = 1.0
        return MultiplexMatrix(rows, "far_field_groups")
    raise ValueError(f"unknown scheme {scheme!r}")


def _lattice_groups(pos: np.ndarray, min_separation: float):
    """Index-stride grouping for sources on a regular grid.

    Groups sources with indices congruent mod (kx, ky) where the stride
    times the grid spacing meets the separation floor; this reproduces
    the simultaneity budget of a uniform scan (e.g. 4 sources at a time
    for a ~5 cm field with ~25 mm separation).
    """
    xs = np.unique(np.round(pos[:, 0], 9))
    ys = np.unique(np.round(pos[:, 1], 9))
    if len(xs) * len(ys) != pos.shape[0]:
        return None
    dx = np.diff(xs)
    dy = np.diff(ys)
    if (len(dx) and not np.allclose(dx, dx[0], atol=1e-9)) or \
            (len(dy) and not np.allclose(dy, dy[0], atol=1e-9)):
        return None
    sx = dx[0] if len(dx) else np.inf
    sy = dy[0] if len(dy) else np.inf
    kx = min(len(xs), int(np.ceil(min_separation / sx))) if np.isfinite(sx) else 1
    ky = min(len(ys), int(np.ceil(min_separation / sy))) if np.isfinite(sy) else 1
    ix = np.searchsorted(xs, np.round(pos[:, 0], 9))
    iy = np.searchsorted(ys, np.round(pos[:, 1], 9))
    groups = []
    for a in range(kx):
        for b in range(ky):
            members = np.where((ix % kx == a) & (iy % ky == b))[0]
            if len(members):
                groups.append(members)
    # stride grouping is only valid if singleton-free separations hold
    for members in groups:
        p = pos[members]
        for i in range(len(p)):
            d2 = np.sum((p[i + 1:] - p[i]) ** 2, axis=1)
            if len(d2) and d2.min() < min_separation**2 - 1e-9:
                return None
    return groups


def _greedy_groups(pos: np.ndarray, min_separation: float):
    unassigned = list(range(pos.shape[0]))
    groups = []
    while unassigned:
        group = []
        for s in list(unassigned):
            if all(np.hypot(*(pos[s] - pos[t])) >= min_separation for t in group):
                group.append(s)
        for s in group:
            unassigned.remove(s)
        groups.append(np.asarray(group))
    return groups


def apply_multiplex(S: MultiplexMatrix, m: TransientSet) -> TransientSet:
    """y = S m along the source axis.

    Confocal data only carries diagonal (source==detector) transients, so
    each pattern's capture at detector d reduces to S[p, d] * m[d]: for
    far-field grouping this is exactly the assign-to-nearest-active-source
    model (cross-talk from far sources is taken as zero).
    """
    v = m.values
    if v.ndim == 2:
        if S.n_sources != v.shape[0]:
            raise DimensionMismatchError(f"S expects {S.n_sources} sources, data has {v.shape[0]}")
        y = S.S[:, :, None] * v[None, :, :]
    else:
        if S.n_sources != v.shape[0]:
            raise DimensionMismatchError(f"S expects {S.n_sources} sources, data has {v.shape[0]}")
        y = np.einsum("ps,sdt->pdt", S.S, v)
    return TransientSet(y, m.scan, signed=True)


def multiplex_adjoint(S: MultiplexMatrix, y: np.ndarray, confocal: bool) -> np.ndarray:
    if confocal:
        return (S.S[:, :, None] * y).sum(axis=0)
    return np.einsum("ps,pdt->sdt", S.S, y)


def demultiplex(S: MultiplexMatrix, y: TransientSet, confocal: bool = False) -> TransientSet:
    """Recover per-source transients from pattern captures.

    With `confocal=True` the captures y[p, d, t] are per-detector reads of
    S[p, d] * m[d, t]; the inverse mixing is applied per detector and the
    diagonal (d == source) series is returned, shape (N, T).
    """
    v = np.asarray(y.values, dtype=np.float64)
    if S.scheme == "far_field_groups":
        # each source appears in exactly one pattern; read it back out
        out = np.zeros((S.n_sources,) + v.shape[2:])
        for s in range(S.n_sources):
            p = int(np.argmax(S.S[:, s]))
            out[s] = v[p, s]
        return TransientSet(out, y.scan, signed=True)
    if S.n_patterns != S.n_sources:
        raise DimensionMismatchError("demultiplex needs a square pattern matrix")
    if confocal:
        s_inv = np.linalg.inv(S.S)
        m = np.einsum("dp,pdt->dt", s_inv, v)
        return TransientSet(m, y.scan, signed=True)
    flat = v.reshape(S.n_patterns, -1)
    m = np.linalg.solve(S.S, flat).reshape((S.n_sources,) + v.shape[1:])
    return TransientSet(m, y.scan, signed=True)


class MultiplexedOperator:
    """Composition S . A of a pattern matrix with a forward operator."""

    def __init__(self, S: MultiplexMatrix, inner):
        self.S = S
        self.inner = inner
        ms = inner.meas_shape
        self._confocal = len(ms) == 2
        n_src = ms[0]
        if S.n_sources != n_src:
            raise DimensionMismatchError(f"S expects {S.n_sources} sources, operator yields {n_src}")
        self.meas_shape = (S.n_patterns,) + tuple(ms)[0 if not self._confocal else 1:]
        if self._confocal:
            self.meas_shape = (S.n_patterns, ms[0], ms[1])
        self.vol_shape = inner.vol_shape
        self.grid = getattr(inner, "grid", None)

    def apply(self, vol: np.ndarray) -> np.ndarray:
        m = self.inner.apply(vol)
        if self._confocal:
            return self.S.S[:, :, None] * m[None, :, :]
        return np.einsum("ps,sdt->pdt", self.S.S, m)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y).reshape(self.meas_shape)
        if self._confocal:
            m = (self.S.S[:, :, None] * y).sum(axis=0)
        else:
            m = np.einsum("ps,pdt->sdt", self.S.S, y)
        return self.inner.adjoint(m)
