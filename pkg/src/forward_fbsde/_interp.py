"""Linear interpolation with an index-arithmetic fast path for uniform grids."""

from __future__ import annotations

import numpy as np


def bracket(grid: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
    """Left index and weight of ``x`` in ``grid``; values outside are clamped to the end nodes."""
    x = np.clip(np.asarray(x, dtype=float), grid[0], grid[-1])
    n = grid.size
    h = (grid[-1] - grid[0]) / (n - 1)
    if np.allclose(np.diff(grid), h, rtol=1e-12, atol=0.0):
        i = np.minimum(((x - grid[0]) / h).astype(np.intp), n - 2)
    else:
        i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, n - 2)
    return i, (x - grid[i]) / (grid[i + 1] - grid[i])


def interp(grid: np.ndarray, values: np.ndarray, x) -> np.ndarray:
    i, w = bracket(grid, x)
    return (1 - w) * values[i] + w * values[i + 1]
