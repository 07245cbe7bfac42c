"""Synthetic heterogeneity maps used by the simulation experiments."""

from __future__ import annotations

import numpy as np

from .core_types import VolumeImage, VoxelGrid

# 8x8 letter bitmap, rows top to bottom
_LETTER_R = [
    "111110..",
    "1....1..",
    "1....1..",
    "11111...",
    "1..1....",
    "1...1...",
    "1....1..",
    "1.....1.",
]


def letter_r(grid: VoxelGrid, depth_index: int = 0, amplitude: float = 1.0) -> VolumeImage:
    """Blocky letter 'R' resampled onto the grid's lateral raster."""
    L, W, _ = grid.dims
    bitmap = np.array([[c == "1" for c in row] for row in _LETTER_R], dtype=float)
    # bitmap rows run top-to-bottom = decreasing y; columns = +x
    src = bitmap.T[:, ::-1]  # (x, y)
    xi = np.clip((np.arange(L) * src.shape[0]) // L, 0, src.shape[0] - 1)
    yi = np.clip((np.arange(W) * src.shape[1]) // W, 0, src.shape[1] - 1)
    v = np.zeros(grid.dims)
    v[:, :, depth_index] = amplitude * src[np.ix_(xi, yi)]
    return VolumeImage(v, grid)


def discs(grid: VoxelGrid, specs) -> VolumeImage:
    """Circular pillars: specs are (center_xy, diameter_mm, depth_mm, value)."""
    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    zs = grid.depth_centers
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    v = np.zeros(grid.dims)
    for (cx, cy), diameter, depth, value in specs:
        zi = int(np.argmin(np.abs(zs - depth)))
        mask = (gx - cx) ** 2 + (gy - cy) ** 2 <= (diameter / 2.0) ** 2
        v[:, :, zi][mask] = value
    return VolumeImage(v, grid)


def point(grid: VoxelGrid, index: tuple[int, int, int], amplitude: float = 1.0) -> VolumeImage:
    v = np.zeros(grid.dims)
    v[index] = amplitude
    return VolumeImage(v, grid)
