"""Axis-aligned grid partition of normalized clouds into per-cell patches.

The grid always spans [-1, 1]^3 regardless of occupancy; a level-l grid has
l^3 cells indexed canonically as ix + iy*l + iz*l^2 with x fastest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidLevel
from .pointset import ColoredPointCloud

__all__ = ["PatchGrid", "MAX_LEVEL", "POINTS_PER_ROUND", "cell_indices", "divide", "select_level"]

MAX_LEVEL = 10

# Points emitted per sampling round; also the per-cell capacity unit that
# level selection targets (8 rounds of 3072).
POINTS_PER_ROUND = 3072
_LEVEL_TARGET = 8 * POINTS_PER_ROUND


def _check_level(level: int) -> int:
    level = int(level)
    if not 1 <= level <= MAX_LEVEL:
        raise InvalidLevel(f"level must be in [1, {MAX_LEVEL}], got {level}")
    return level


@dataclass(frozen=True)
class PatchGrid:
    """Cell assignment of one cloud at a fixed grid level."""

    level: int
    cell_of_point: np.ndarray  # (N,) int64 canonical cell index per point
    counts: np.ndarray  # (level^3,) int64, zeros kept for empty cells
    occupied: np.ndarray  # ascending canonical indexes of non-empty cells

    def __post_init__(self):
        for name in ("cell_of_point", "counts", "occupied"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def cell_edge(self) -> float:
        return 2.0 / self.level


def cell_indices(positions: np.ndarray, level: int) -> np.ndarray:
    """Canonical cell index for each position; boundary points go to the higher cell."""
    level = _check_level(level)
    pos = np.asarray(positions, dtype=np.float64)
    axes = np.floor((pos + 1.0) / 2.0 * level).astype(np.int64)
    axes = np.clip(axes, 0, level - 1)
    return axes[:, 0] + axes[:, 1] * level + axes[:, 2] * level * level


def divide(cloud: ColoredPointCloud, level: int):
    """Split a cloud into per-cell patches.

    Returns (grid, patches) where patches holds one sub-cloud per occupied
    cell, ordered by ascending canonical cell index.  Every input row lands
    in exactly one patch.
    """
    level = _check_level(level)
    cells = cell_indices(cloud.positions, level)
    counts = np.bincount(cells, minlength=level**3).astype(np.int64)
    occupied = np.flatnonzero(counts).astype(np.int64)
    order = np.argsort(cells, kind="stable")
    bounds = np.cumsum(counts[occupied])
    patches = [
        cloud.take(order[start:stop])
        for start, stop in zip(np.concatenate([[0], bounds[:-1]]), bounds)
    ]
    grid = PatchGrid(level, cells, counts, occupied)
    return grid, patches


def select_level(n_points: int, target: int = _LEVEL_TARGET) -> int:
    """Smallest level whose average cell load n/l^3 fits the target, capped at MAX_LEVEL."""
    if n_points < 1:
        raise InvalidLevel(f"need at least one point, got {n_points}")
    for level in range(1, MAX_LEVEL + 1):
        if n_points / level**3 <= target:
            return level
    return MAX_LEVEL
