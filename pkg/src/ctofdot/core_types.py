"""Shared domain vocabulary: geometry, optics, measurement containers.

Unit conventions, fixed package-wide: lengths in mm, times in ps,
coefficients in mm^-1. The slab occupies z in [0, thickness] with the
entry face at z = 0; lateral coordinates are centered, so the slab spans
x in [-Ex/2, Ex/2] and y in [-Ey/2, Ey/2]. All containers are treated as
immutable value objects after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

C0_MM_PER_PS = 0.299792458  # vacuum speed of light


class SceneError(ValueError):
    """Raised when a scene fails validation and a caller required validity."""


@dataclass(frozen=True)
class OpticalProperties:
    """Bulk optical properties of a homogeneous medium."""

    mu_s: float  # scattering coefficient, mm^-1
    mu_a: float = 0.0  # absorption coefficient, mm^-1
    g: float = 0.0  # Henyey-Greenstein anisotropy
    n: float = 1.4  # refractive index

    def __post_init__(self):
        if self.mu_s < 0:
            raise ValueError(f"mu_s must be >= 0, got {self.mu_s}")
        if self.mu_a < 0:
            raise ValueError(f"mu_a must be >= 0, got {self.mu_a}")
        if not -1.0 < self.g < 1.0:
            raise ValueError(f"g must be in (-1, 1), got {self.g}")
        if self.n < 1.0:
            raise ValueError(f"n must be >= 1, got {self.n}")

    @property
    def mu_s_reduced(self) -> float:
        return self.mu_s * (1.0 - self.g)


@dataclass(frozen=True)
class FluorophoreModel:
    """Fluorescent marker description.

    `excitation_rejection` is the fraction of excitation light passed by the
    emission filter at the detector (0 = perfect filter, 1 = no filter).
    """

    lifetime_ns: float
    emission_props: OpticalProperties
    excitation_rejection: float = 0.0

    def __post_init__(self):
        if self.lifetime_ns <= 0:
            raise ValueError("fluorophore lifetime must be > 0")
        if not 0.0 <= self.excitation_rejection <= 1.0:
            raise ValueError("excitation_rejection must be in [0, 1]")

    @property
    def lifetime_ps(self) -> float:
        return self.lifetime_ns * 1000.0


@dataclass(frozen=True)
class SlabMedium:
    """Homogeneous scattering slab with optional embedded fluorophore."""

    props: OpticalProperties
    thickness: float  # mm
    lateral_extent: tuple[float, float] = (50.0, 50.0)  # mm
    fluorescence: Optional[FluorophoreModel] = None

    def __post_init__(self):
        if self.thickness <= 0:
            raise ValueError("slab thickness must be > 0")
        if min(self.lateral_extent) <= 0:
            raise ValueError("lateral extents must be > 0")

    @property
    def optical_depth(self) -> float:
        """Slab thickness in scattering mean free paths."""
        return self.thickness * self.props.mu_s


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned voxel grid embedded in the slab.

    `origin` is the (x, y, z) position of the grid corner in slab
    coordinates (z measured from the entry face); voxel (i, j, k) has its
    center at origin + (i+1/2, j+1/2, k+1/2) * pitch.
    """

    dims: tuple[int, int, int]  # (L, W, H) voxel counts along (x, y, z)
    pitch: tuple[float, float, float]  # mm per voxel per axis
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError("all grid dims must be >= 1")
        if any(p <= 0 for p in self.pitch):
            raise ValueError("grid pitch must be > 0")

    @classmethod
    def centered(cls, dims, pitch, z0: float = 0.0) -> "VoxelGrid":
        """Grid laterally centered on the slab axis, top face at depth z0."""
        dims = tuple(int(d) for d in dims)
        pitch = tuple(float(p) for p in (pitch if np.ndim(pitch) else (pitch,) * 3))
        origin = (-dims[0] * pitch[0] / 2.0, -dims[1] * pitch[1] / 2.0, z0)
        return cls(dims, pitch, origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple(d * p for d, p in zip(self.dims, self.pitch))

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.pitch[axis]

    def centers(self) -> np.ndarray:
        """Voxel center coordinates, shape (L, W, H, 3)."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    @property
    def depth_centers(self) -> np.ndarray:
        return self.axis_centers(2)


@dataclass(frozen=True)
class TimeAxis:
    """Uniform arrival-time binning of transients."""

    n_bins: int
    bin_width: float  # ps
    gate_start: float = 0.0  # ps

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")

    @property
    def gate_end(self) -> float:
        return self.gate_start + self.n_bins * self.bin_width

    @property
    def centers(self) -> np.ndarray:
        return self.gate_start + (np.arange(self.n_bins) + 0.5) * self.bin_width

    @property
    def edges(self) -> np.ndarray:
        return self.gate_start + np.arange(self.n_bins + 1) * self.bin_width


@dataclass(frozen=True)
class ScanConfig:
    """Source and detector layout on the slab entry face."""

    sources: np.ndarray  # (N_s, 2) mm
    detectors: np.ndarray  # (N_d, 2) mm
    time_axis: TimeAxis
    confocal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sources", np.atleast_2d(np.asarray(self.sources, dtype=np.float64)))
        object.__setattr__(self, "detectors", np.atleast_2d(np.asarray(self.detectors, dtype=np.float64)))
        if self.sources.shape[1] != 2 or self.detectors.shape[1] != 2:
            raise ValueError("positions must be (x, y) pairs")

    @property
    def confocal_consistent(self) -> bool:
        return (not self.confocal) or (
            self.sources.shape == self.detectors.shape
            and np.array_equal(self.sources, self.detectors)
        )

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.detectors.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.n_sources if self.confocal else self.n_sources * self.n_detectors

    @classmethod
    def confocal_grid(cls, nx: int, ny: int, pitch: float, time_axis: TimeAxis,
                      center=(0.0, 0.0)) -> "ScanConfig":
        """Confocal raster of nx*ny collocated pairs, centered on `center`."""
        xs = (np.arange(nx) - (nx - 1) / 2.0) * pitch + center[0]
        ys = (np.arange(ny) - (ny - 1) / 2.0) * pitch + center[1]
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pos = np.column_stack([gx.ravel(), gy.ravel()])
        return cls(pos, pos, time_axis, confocal=True)


@dataclass(frozen=True)
class TransientSet:
    """Time-binned measurements.

    `values` has shape (N_pairs, N_t) for confocal scans and
    (N_s, N_d, N_t) for full scans; multiplexed data replaces the source
    axis with a pattern axis. Physical data (expected or sampled photon
    counts) must be non-negative; outputs of signed linear operators
    (absorption Jacobians, +-1 Hadamard captures) set `signed=True` and
    skip that check so linear algebra on them stays exact.
    """

    values: np.ndarray
    scan: Optional[ScanConfig] = None
    warnings: tuple[str, ...] = ()
    signed: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        object.__setattr__(self, "values", v)
        if v.ndim not in (2, 3):
            raise ValueError(f"transient tensor must be 2D or 3D, got ndim={v.ndim}")
        if not self.signed and v.size and float(v.min()) < 0:
            raise ValueError("transient values must be non-negative")
        if self.scan is not None and v.shape[-1] != self.scan.time_axis.n_bins:
            raise ValueError("last axis must match time_axis.n_bins")

    @property
    def n_time_bins(self) -> int:
        return self.values.shape[-1]

    def with_values(self, values, warnings=None) -> "TransientSet":
        return TransientSet(values, self.scan, self.warnings if warnings is None else tuple(warnings))


@dataclass(frozen=True)
class VolumeImage:
    """Heterogeneity map over a voxel grid (2D plane when H == 1)."""

    values: np.ndarray
    grid: VoxelGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != tuple(self.grid.dims):
            raise ValueError(f"values shape {v.shape} does not match grid dims {self.grid.dims}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: VoxelGrid) -> "VolumeImage":
        return cls(np.zeros(grid.dims), grid)

    @property
    def plane(self) -> np.ndarray:
        """The (L, W) slice for single-layer grids."""
        if self.grid.dims[2] != 1:
            raise ValueError("plane view requires H == 1")
        return self.values[:, :, 0]


def speed_in_medium(props: OpticalProperties) -> float:
    """Phase velocity c0/n in mm/ps."""
    return C0_MM_PER_PS / props.n


def validate_scene(medium: SlabMedium, grid: Optional[VoxelGrid] = None,
                   scan: Optional[ScanConfig] = None) -> list[str]:
    """Collect every invariant violation; an empty list means the scene is valid."""
    errors: list[str] = []
    ex, ey = medium.lateral_extent
    if grid is not None:
        gx0, gy0, gz0 = grid.origin
        lx, ly, lz = grid.extent
        if gz0 < -1e-12 or gz0 + lz > medium.thickness + 1e-12:
            errors.append("grid: grid exceeds slab depth")
        if gx0 < -ex / 2 - 1e-12 or gx0 + lx > ex / 2 + 1e-12:
            errors.append("grid: grid exceeds slab lateral extent (x)")
        if gy0 < -ey / 2 - 1e-12 or gy0 + ly > ey / 2 + 1e-12:
            errors.append("grid: grid exceeds slab lateral extent (y)")
    if scan is not None:
        for name, pos in (("sources", scan.sources), ("detectors", scan.detectors)):
            if pos.size and (np.abs(pos[:, 0]).max() > ex / 2 + 1e-12 or np.abs(pos[:, 1]).max() > ey / 2 + 1e-12):
                errors.append(f"scan.{name}: position outside slab lateral extent")
        if not scan.confocal_consistent:
            errors.append("scan: confocal flag with mismatched source/detector lists")
    return errors


def ensure_valid_scene(medium, grid=None, scan=None) -> None:
    errors = validate_scene(medium, grid, scan)
    if errors:
        raise SceneError("; ".join(errors))
