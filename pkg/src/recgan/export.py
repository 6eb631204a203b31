"""Voxel grid -> cube-surface OBJ for external viewers."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .grid import OccupancyGrid, ProbGrid

# cube corner k has offset (k & 1, k >> 1 & 1, k >> 2 & 1) in (x, y, z)
_FACES = {
    (-1, 0, 0): [(0, 4, 6), (0, 6, 2)],
    (1, 0, 0): [(1, 3, 7), (1, 7, 5)],
    (0, -1, 0): [(0, 1, 5), (0, 5, 4)],
    (0, 1, 0): [(2, 6, 7), (2, 7, 3)],
    (0, 0, -1): [(0, 2, 3), (0, 3, 1)],
    (0, 0, 1): [(4, 5, 7), (4, 7, 6)],
}
_CORNERS = np.array([[k & 1, k >> 1 & 1, k >> 2 & 1] for k in range(8)], dtype=float)


def occupied(grid: OccupancyGrid | ProbGrid, threshold: float = 0.5) -> np.ndarray:
    if isinstance(grid, OccupancyGrid):
        return grid.data
    return grid.values.astype(np.float64) > threshold


def grid_to_obj(mask: np.ndarray, scale: float = 1.0) -> str:
    """One cube per occupied voxel with its own 8 vertices; faces between occupied neighbours dropped.

    ``mask`` is indexed [z, y, x]; cubes are placed in voxel units times ``scale``.
    """
    padded = np.pad(mask, 1)
    lines = [f"# {int(mask.sum())} voxels"]
    faces = []
    for n, (z, y, x) in enumerate(np.argwhere(mask)):
        for v in (_CORNERS + (x, y, z)) * scale:
            lines.append(f"v {v[0]:g} {v[1]:g} {v[2]:g}")
        base = 8 * n + 1
        for (dx, dy, dz), tris in _FACES.items():
            if padded[z + 1 + dz, y + 1 + dy, x + 1 + dx]:
                continue
            faces += [f"f {a + base} {b + base} {c + base}" for a, b, c in tris]
    return "\n".join(lines + faces) + "\n"


def export_obj(grid: OccupancyGrid | ProbGrid, path: str | Path, threshold: float = 0.5) -> None:
    Path(path).write_text(grid_to_obj(occupied(grid, threshold)))
