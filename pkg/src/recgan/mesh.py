"""Triangle meshes, ray casting and solid voxelization."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import DimensionError, OccupancyGrid, is_power_of_two

RAY_EPS = 1e-9


class GeometryError(ValueError):
    pass


class ObjParseError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise GeometryError("vertex coordinates must be finite")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")

    @property
    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        verts = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return TriangleMesh(verts, self.triangles.copy())


@dataclass(frozen=True)
class GridFrame:
    """Axis-aligned cube shared by the partial and full grids of one pair."""

    origin: tuple[float, float, float]
    edge: float
    resolution: int

    def __post_init__(self):
        if not self.edge > 0:
            raise GeometryError("frame edge must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + self.edge / 2

    def voxel_centers(self, resolution: int | None = None) -> np.ndarray:
        """Center coordinates along one axis (identical for all three axes up to origin)."""
        r = resolution or self.resolution
        return (np.arange(r) + 0.5) * (self.edge / r)

    def with_resolution(self, resolution: int) -> "GridFrame":
        return GridFrame(self.origin, self.edge, resolution)


# ---------------------------------------------------------------------------
# OBJ

def parse_obj(text: str) -> TriangleMesh:
    """Parse the ``v``/``f`` subset of Wavefront OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    face_lines = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            try:
                verts.append([float(c) for c in parts[1:4]])
            except ValueError:
                raise ObjParseError(f"line {lineno}: bad vertex record") from None
            if len(verts[-1]) != 3:
                raise ObjParseError(f"line {lineno}: vertex needs 3 coordinates")
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise ObjParseError(f"line {lineno}: bad face index {tok!r}") from None
                if i <= 0:
                    raise ObjParseError(f"line {lineno}: only absolute 1-based indices supported")
                idx.append(i - 1)
            if len(idx) < 3:
                raise ObjParseError(f"line {lineno}: face needs at least 3 vertices")
            faces.append(idx)
            face_lines.append(lineno)
    if not faces:
        raise ObjParseError("no faces in OBJ data")
    tris = []
    for idx, lineno in zip(faces, face_lines):
        bad = [i + 1 for i in idx if i >= len(verts)]
        if bad:
            raise ObjParseError(
                f"line {lineno}: face references vertex {bad[0]} of {len(verts)}")
        tris.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1))
    return TriangleMesh(np.array(verts), np.array(tris))


def load_obj(path: str | Path) -> TriangleMesh:
    return parse_obj(Path(path).read_text())


def format_obj(mesh: TriangleMesh) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ray casting

def ray_triangle(origin, direction, tri) -> float | None:
    """Möller-Trumbore intersection; edges count as hits. Returns distance or None."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in tri)
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(d, e2)
    det = float(e1 @ pvec)
    if abs(det) < 1e-15:
        return None
    inv = 1.0 / det
    tvec = o - v0
    u = float(tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = float(d @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ qvec) * inv
    return t if t > RAY_EPS else None


def ray_triangles(origins: np.ndarray, directions: np.ndarray, tri) -> np.ndarray:
    """Vectorized :func:`ray_triangle` over many rays against one triangle; misses are inf."""
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in tri)
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(directions, e2)
    det = pvec @ e1
    ok = np.abs(det) >= 1e-15
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    tvec = origins - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", directions, qvec) * inv
    t = (qvec @ e2) * inv
    hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > RAY_EPS)
    return np.where(hit, t, np.inf)


# ---------------------------------------------------------------------------
# normalization and voxelization

def normalize_to_frame(mesh: TriangleMesh, resolution: int, pad: float = 0.05,
                       edge: float = 1.0) -> tuple[TriangleMesh, GridFrame]:
    """Center the mesh in a cube of side ``edge`` at the origin, longest side = (1-2*pad)*edge."""
    if len(mesh.triangles) == 0 or len(mesh.vertices) == 0:
        raise GeometryError("mesh has no triangles")
    if not 0 <= pad < 0.5:
        raise GeometryError(f"pad must lie in [0, 0.5), got {pad}")
    used = mesh.vertices[np.unique(mesh.triangles)]
    lo, hi = used.min(axis=0), used.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise GeometryError("mesh has zero extent")
    scale = (1 - 2 * pad) * edge / extent
    verts = (mesh.vertices - (lo + hi) / 2) * scale
    frame = GridFrame((-edge / 2,) * 3, edge, resolution)
    return TriangleMesh(verts, mesh.triangles.copy()), frame


def _column_hits(corners: np.ndarray, axis: int, frame: GridFrame):
    """Min/max hit coordinate along ``axis`` for every grid column parallel to it.

    Returns arrays (lo, hi) of shape (r, r) indexed by the two remaining axes in
    increasing order; columns without hits hold +inf / -inf.
    """
    r = frame.resolution
    b, c = [a for a in range(3) if a != axis]
    origin = np.asarray(frame.origin, dtype=np.float64)
    cell = frame.edge / r
    centers_b = origin[b] + (np.arange(r) + 0.5) * cell
    centers_c = origin[c] + (np.arange(r) + 0.5) * cell
    lo = np.full((r, r), np.inf)
    hi = np.full((r, r), -np.inf)
    for tri in corners:
        pb, pc, pa = tri[:, b], tri[:, c], tri[:, axis]
        area = (pb[1] - pb[0]) * (pc[2] - pc[0]) - (pb[2] - pb[0]) * (pc[1] - pc[0])
        if abs(area) < 1e-18:
            continue  # parallel to the ray direction
        jb = (np.searchsorted(centers_b, pb.min(), "left"),
              np.searchsorted(centers_b, pb.max(), "right"))
        jc = (np.searchsorted(centers_c, pc.min(), "left"),
              np.searchsorted(centers_c, pc.max(), "right"))
        if jb[0] >= jb[1] or jc[0] >= jc[1]:
            continue
        qb, qc = np.meshgrid(centers_b[jb[0]:jb[1]], centers_c[jc[0]:jc[1]], indexing="ij")
        w0 = (pb[1] - qb) * (pc[2] - qc) - (pb[2] - qb) * (pc[1] - qc)
        w1 = (pb[2] - qb) * (pc[0] - qc) - (pb[0] - qb) * (pc[2] - qc)
        w2 = area - w0 - w1
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        coord = l0 * pa[0] + l1 * pa[1] + l2 * pa[2]
        sl = (slice(jb[0], jb[1]), slice(jc[0], jc[1]))
        lo[sl] = np.where(inside, np.minimum(lo[sl], coord), lo[sl])
        hi[sl] = np.where(inside, np.maximum(hi[sl], coord), hi[sl])
    return lo, hi


def voxelize_solid(mesh: TriangleMesh, frame: GridFrame) -> OccupancyGrid:
    """Mark a voxel occupied iff rays from its center along all six axis directions hit the mesh."""
    if len(mesh.triangles) == 0:
        raise GeometryError("mesh has no triangles")
    r = frame.resolution
    if not is_power_of_two(r):
        raise DimensionError(f"resolution must be a power of two, got {r}")
    corners = mesh.corners
    origin = np.asarray(frame.origin, dtype=np.float64)
    cell = frame.edge / r
    occupied = np.ones((r, r, r), dtype=bool)  # indexed [z, y, x]
    for axis in range(3):
        lo, hi = _column_hits(corners, axis, frame)
        s = origin[axis] + (np.arange(r) + 0.5) * cell
        # lo/hi are indexed by the two other axes in increasing order (b < c)
        plus = hi[..., None] > s + RAY_EPS
        minus = lo[..., None] < s - RAY_EPS
        enclosed = plus & minus  # shape (r_b, r_c, r_axis)
        # map (b, c, axis) in x/y/z terms onto the [z, y, x] array
        b, c = [a for a in range(3) if a != axis]
        xyz = np.moveaxis(enclosed, (0, 1, 2), (b, c, axis))
        occupied &= np.transpose(xyz, (2, 1, 0))
    return OccupancyGrid(occupied)
