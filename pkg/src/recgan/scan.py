"""Virtual depth camera: view sampling, depth rendering and back-projection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import DimensionError, OccupancyGrid
from .mesh import RAY_EPS, GridFrame, TriangleMesh, ray_triangles


def euler_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation yaw(Z) * pitch(Y) * roll(X), i.e. intrinsic Z-Y-X composition."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def view_id(self) -> str:
        return "v" + "_".join(f"{math.degrees(a):06.2f}" for a in self.angles)


@dataclass
class DepthImage:
    depth: np.ndarray  # (height, width), meters along camera Z, 0 = no hit

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def default_intrinsics(image_size: int, distance: float, edge: float = 1.0) -> dict:
    """Focal length at which the near face of the frame cube spans 80% of the image."""
    half_angle = (edge / 2) / (distance - edge / 2)
    f = 0.8 * (image_size / 2) / half_angle
    return dict(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2,
                width=image_size, height=image_size)


def sample_views(n_per_axis: int, distance: float = 2.0, image_size: int = 128,
                 edge: float = 1.0) -> list[Camera]:
    """All n**3 combinations of roll/pitch/yaw at 2*pi*k/n, camera on -Z looking at the origin."""
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be >= 1")
    if distance <= edge / 2:
        raise ValueError("camera must sit outside the frame cube")
    steps = [2 * math.pi * k / n_per_axis for k in range(n_per_axis)]
    intr = default_intrinsics(image_size, distance, edge)
    cams = []
    for roll in steps:
        for pitch in steps:
            for yaw in steps:
                cams.append(Camera(**intr, rotation=euler_zyx(roll, pitch, yaw),
                                   translation=np.array([0.0, 0.0, distance]),
                                   angles=(roll, pitch, yaw)))
    return cams


def pixel_rays(camera: Camera) -> np.ndarray:
    """Camera-frame ray directions (z = 1) through every pixel center, shape (H, W, 3)."""
    u = (np.arange(camera.width) + 0.5 - camera.cx) / camera.fx
    v = (np.arange(camera.height) + 0.5 - camera.cy) / camera.fy
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def render_depth(mesh: TriangleMesh, camera: Camera) -> DepthImage:
    """Nearest-hit depth per pixel center; 0.0 where the ray misses."""
    h, w = camera.height, camera.width
    rays = pixel_rays(camera)
    zbuf = np.full((h, w), np.inf)
    corners = camera.to_camera(mesh.vertices)[mesh.triangles]
    for tri in corners:
        z = tri[:, 2]
        if (z <= 0).all():
            continue
        if (z > RAY_EPS).all():
            u = camera.fx * tri[:, 0] / z + camera.cx
            v = camera.fy * tri[:, 1] / z + camera.cy
            u0 = max(int(math.floor(u.min() - 0.5)), 0)
            u1 = min(int(math.ceil(u.max() - 0.5)) + 1, w)
            v0 = max(int(math.floor(v.min() - 0.5)), 0)
            v1 = min(int(math.ceil(v.max() - 0.5)) + 1, h)
            if u0 >= u1 or v0 >= v1:
                continue
        else:
            u0, u1, v0, v1 = 0, w, 0, h
        d = rays[v0:v1, u0:u1].reshape(-1, 3)
        t = ray_triangles(np.zeros_like(d), d, tri).reshape(v1 - v0, u1 - u0)
        zbuf[v0:v1, u0:u1] = np.minimum(zbuf[v0:v1, u0:u1], t)
    # rays have unit z component, so the ray parameter is the camera-Z depth
    return DepthImage(np.where(np.isfinite(zbuf), zbuf, 0.0))


def depth_to_pointcloud(img: DepthImage, camera: Camera) -> np.ndarray:
    """Back-project hit pixels to camera-frame points, shape (P, 3)."""
    if img.width != camera.width or img.height != camera.height:
        raise DimensionError(
            f"image {img.width}x{img.height} does not match camera "
            f"{camera.width}x{camera.height}")
    v, u = np.nonzero(img.depth > 0)
    d = img.depth[v, u]
    x = (u + 0.5 - camera.cx) * d / camera.fx
    y = (v + 0.5 - camera.cy) * d / camera.fy
    return np.stack([x, y, d], axis=1)


def project(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame points to continuous pixel coordinates and depth."""
    z = points[:, 2]
    return camera.fx * points[:, 0] / z + camera.cx, camera.fy * points[:, 1] / z + camera.cy, z


def pointcloud_to_grid(points: np.ndarray, frame: GridFrame,
                       resolution: int) -> tuple[OccupancyGrid, int]:
    """Mark cells of a ``resolution``-grid over ``frame`` that contain a point.

    Points are in the frame's (model) coordinates. The frame is treated as a
    closed cube. Returns the grid and the number of points dropped outside it.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cell = frame.edge / resolution
    rel = (pts - np.asarray(frame.origin)) / cell
    tol = 1e-9 * resolution
    inside = ((rel >= -tol) & (rel <= resolution + tol)).all(axis=1)
    idx = np.clip(np.floor(rel[inside]).astype(np.int64), 0, resolution - 1)
    data = np.zeros((resolution,) * 3, dtype=bool)
    data[idx[:, 2], idx[:, 1], idx[:, 0]] = True
    return OccupancyGrid(data), int((~inside).sum())


def write_depth_pgm(img: DepthImage, path: str | Path) -> None:
    """16-bit binary PGM with millimeter quantization (inspection only, lossy)."""
    mm = np.clip(np.rint(img.depth * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())


def read_depth_pgm(path: str | Path) -> DepthImage:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1: pos + 1 + 2 * w * h]
    mm = np.frombuffer(body, dtype=">u2").reshape(h, w)
    return DepthImage(mm.astype(np.float64) / 1000.0)
