"""Grid helpers shared by the spatial methods: bilinear resampling and cells."""

from __future__ import annotations

import numpy as np


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix for 1-D linear resampling.

    Uses half-pixel centres with edge clamping, so resizing to the same
    length is the identity.
    """
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def resize_bilinear(grid: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    """Resize a 1-D or 2-D grid to ``out_shape``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        return bilinear_matrix(grid.shape[0], out_shape[0]) @ grid
    ry = bilinear_matrix(grid.shape[0], out_shape[0])
    rx = bilinear_matrix(grid.shape[1], out_shape[1])
    return ry @ grid @ rx.T


def spatial_shape(input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """The axes a mask lives on: ``(H, W)`` for images, ``(n,)`` for vectors."""
    if len(input_shape) == 3:
        return tuple(input_shape[1:])
    if len(input_shape) == 1:
        return tuple(input_shape)
    raise ValueError(f"unsupported input rank {len(input_shape)}")


def expand_spatial(values: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a spatial map over the channel axis of an image."""
    if len(input_shape) == 3:
        return np.broadcast_to(values, input_shape).copy()
    return np.asarray(values, dtype=np.float64).reshape(input_shape).copy()


def normalize_grid(grid, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Coerce an int or tuple grid to one entry per spatial axis."""
    spatial = spatial_shape(input_shape)
    if grid is None:
        return spatial
    if np.isscalar(grid):
        grid = (int(grid),) * len(spatial)
    grid = tuple(int(g) for g in grid)
    if len(grid) != len(spatial):
        raise ValueError(f"grid {grid} does not match spatial axes {spatial}")
    if any(g < 1 for g in grid):
        raise ValueError("grid dims must be >= 1")
    if any(g > s for g, s in zip(grid, spatial)):
        raise ValueError(f"grid {grid} finer than input {spatial}")
    return grid


def cell_index(input_shape: tuple[int, ...], grid: tuple[int, ...]) -> np.ndarray:
    """Cell id of every input element for a regular grid partition.

    Element ``i`` along an axis of length ``L`` with ``g`` cells belongs to
    cell ``floor(i * g / L)``. Channels share the cell of their pixel.
    """
    spatial = spatial_shape(input_shape)
    axes = [np.arange(s) * g // s for s, g in zip(spatial, grid)]
    if len(axes) == 1:
        ids = axes[0]
    else:
        ids = axes[0][:, None] * grid[1] + axes[1][None, :]
    return expand_spatial(ids, input_shape).astype(np.int64)
