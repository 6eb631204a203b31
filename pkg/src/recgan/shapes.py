"""Procedural meshes standing in for CAD models (boxes, chairs, tables, convex blobs)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriangleMesh, format_obj

_BOX_QUADS = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]


def box(center, size) -> TriangleMesh:
    c, s = np.asarray(center, float), np.asarray(size, float) / 2
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)])
    tris = []
    for a, b, cc, d in _BOX_QUADS:
        tris += [(a, b, cc), (a, cc, d)]
    return TriangleMesh(c + corners * s, np.array(tris))


def merge(meshes) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def convex_blob(rng: np.random.Generator, n_points: int = 24) -> TriangleMesh:
    """Convex hull of random points on an ellipsoid; watertight with outward faces."""
    pts = rng.normal(size=(n_points, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.uniform(0.5, 1.0, size=3)
    hull = ConvexHull(pts)
    tris = hull.simplices.copy()
    for k, (a, b, c) in enumerate(tris):
        n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
        if n @ (pts[a] - pts.mean(axis=0)) < 0:
            tris[k] = (a, c, b)
    return TriangleMesh(pts, tris)


def chair(rng: np.random.Generator) -> TriangleMesh:
    w, d = rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2)
    seat_h, seat_t = rng.uniform(0.8, 1.1), rng.uniform(0.12, 0.2)
    leg = rng.uniform(0.12, 0.18)
    back_h = rng.uniform(0.8, 1.3)
    parts = [box((0, 0, seat_h), (w, d, seat_t)),
             box((0, d / 2 - leg / 2, seat_h + back_h / 2), (w, leg, back_h))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(box((sx * (w - leg) / 2, sy * (d - leg) / 2, seat_h / 2),
                             (leg, leg, seat_h)))
    return merge(parts)


def table(rng: np.random.Generator) -> TriangleMesh:
    w, d = rng.uniform(1.2, 2.0), rng.uniform(0.8, 1.2)
    h, top, leg = rng.uniform(0.8, 1.2), rng.uniform(0.1, 0.18), rng.uniform(0.12, 0.2)
    parts = [box((0, 0, h), (w, d, top))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(box((sx * (w - leg) / 2, sy * (d - leg) / 2, h / 2), (leg, leg, h)))
    return merge(parts)


def crate(rng: np.random.Generator) -> TriangleMesh:
    return box((0, 0, 0), rng.uniform(0.5, 1.0, size=3))


MAKERS = {"chair": chair, "table": table, "blob": convex_blob, "crate": crate}


def write_library(root: str | Path, per_category: int, seed: int,
                  categories=("chair", "table", "blob")) -> list[Path]:
    """Write ``<root>/<category>/<category>_<k>.obj`` for each category."""
    rng = np.random.default_rng(seed)
    paths = []
    for cat in categories:
        folder = Path(root) / cat
        folder.mkdir(parents=True, exist_ok=True)
        for k in range(per_category):
            path = folder / f"{cat}_{k:03d}.obj"
            path.write_text(format_obj(MAKERS[cat](rng)))
            paths.append(path)
    return paths
