"""Mesh -> (partial, full) pair synthesis, model-level splits and manifests."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import OccupancyGrid, is_power_of_two, read_grid, write_grid
from .mesh import GeometryError, GridFrame, ObjParseError, TriangleMesh, load_obj, normalize_to_frame, voxelize_solid
from .scan import (Camera, DepthImage, default_intrinsics, depth_to_pointcloud, pointcloud_to_grid,
                   render_depth, sample_views, write_depth_pgm)

log = logging.getLogger(__name__)

SPLITS = ("train", "val-SV", "val-CV", "test-SV", "test-CV")
MODEL_SPLITS = ("train", "val", "test")


class PipelineError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class ViewConfig:
    r_in: int = 16
    r_out: int = 64
    n_train: int = 2
    n_cross: int = 3
    image_size: int = 128
    distance: float = 2.0
    pad: float = 0.05
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if not (is_power_of_two(self.r_in) and is_power_of_two(self.r_out)):
            raise ValueError("r_in and r_out must be powers of two")
        if self.r_out != 4 * self.r_in:
            raise ValueError(f"r_out must be 4*r_in, got {self.r_in} -> {self.r_out}")
        if self.n_train < 1 or self.n_cross < 1:
            raise ValueError("view counts must be >= 1")
        if self.distance <= 0.5 or self.image_size < 1:
            raise ValueError("camera must sit outside the unit frame with a positive image size")
        if not 0 <= self.pad < 0.5:
            raise ValueError("pad must lie in [0, 0.5)")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValueError("ratios must be three non-negative numbers summing to 1")


VIEW_PROFILES = {
    "desk": ViewConfig(),
    "paper": ViewConfig(r_in=64, r_out=256, n_train=5, n_cross=6, image_size=512,
                        ratios=(220 / 272, 12 / 272, 40 / 272)),
}


@dataclass
class DatasetPair:
    partial: OccupancyGrid
    full: OccupancyGrid
    category: str
    model_id: str
    view_id: str
    frame: GridFrame
    depth: DepthImage | None = None


@dataclass(frozen=True)
class Entry:
    path: str  # "<category>/<model_id>/<view_id>", grids live at <path>.{partial,full}.rgpp
    split: str
    category: str
    model_id: str
    view_id: str


@dataclass
class Manifest:
    entries: list[Entry] = field(default_factory=list)
    seed: int = 0

    def select(self, split: str) -> list[Entry]:
        return [e for e in self.entries if e.split == split]


# ---------------------------------------------------------------------------
# manifest I/O

def format_manifest(manifest: Manifest) -> str:
    lines = ["# path\tsplit\tcategory\tmodel_id\tview_id", f"seed\t{manifest.seed}"]
    lines += ["\t".join((e.path, e.split, e.category, e.model_id, e.view_id))
              for e in manifest.entries]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> Manifest:
    manifest = Manifest()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if fields[0] == "seed" and len(fields) == 2:
            try:
                manifest.seed = int(fields[1])
            except ValueError:
                raise ManifestError(f"line {lineno}: bad seed {fields[1]!r}") from None
            continue
        if len(fields) != 5:
            raise ManifestError(f"line {lineno}: expected 5 tab-separated fields, got {len(fields)}")
        if fields[1] not in SPLITS:
            raise ManifestError(f"line {lineno}: unknown split tag {fields[1]!r}")
        manifest.entries.append(Entry(*fields))
    return manifest


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(format_manifest(manifest))


def read_manifest(path: str | Path) -> Manifest:
    return parse_manifest(Path(path).read_text())


def load_pair(root: str | Path, entry: Entry) -> tuple[OccupancyGrid, OccupancyGrid]:
    base = Path(root) / entry.path
    partial = read_grid(f"{base}.partial.rgpp")
    full = read_grid(f"{base}.full.rgpp")
    if not isinstance(partial, OccupancyGrid) or not isinstance(full, OccupancyGrid):
        raise ManifestError(f"{base}: pair grids must be occupancy grids")
    return partial, full


# ---------------------------------------------------------------------------
# splits

def split_models(model_ids: Sequence[str], ratios: Sequence[float], seed: int) -> dict[str, str]:
    """Assign whole models to train/val/test; reproducible for a fixed seed."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    ids = sorted(set(model_ids))
    n = len(ids)
    active = [k for k, r in enumerate(ratios) if r > 0]
    if n < len(active):
        raise ValueError(f"{n} models cannot fill {len(active)} nonempty splits")
    exact = [n * r for r in ratios]
    counts = [math.floor(e + 1e-9) for e in exact]
    by_remainder = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in by_remainder[: n - sum(counts)]:
        counts[k] += 1
    for k in active:
        if counts[k] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[k] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out, start = {}, 0
    for k, c in enumerate(counts):
        for i in perm[start:start + c]:
            out[ids[i]] = MODEL_SPLITS[k]
        start += c
    return out


def view_sets(cfg: ViewConfig) -> tuple[list[Camera], list[Camera]]:
    """Training views and cross views, the latter minus any pose equal to a training pose."""
    kw = dict(distance=cfg.distance, image_size=cfg.image_size)
    train = sample_views(cfg.n_train, **kw)
    cross = [c for c in sample_views(cfg.n_cross, **kw)
             if not any(np.allclose(c.rotation, t.rotation, atol=1e-9) for t in train)]
    return train, cross


# ---------------------------------------------------------------------------
# synthesis

def scan_pair(mesh: TriangleMesh, view: Camera, cfg: ViewConfig,
              keep_depth: bool = False) -> tuple:
    """Rotate the mesh into the view, voxelize it solid, and voxelize its depth scan.

    Returns (partial, full, frame, dropped), plus the depth image when ``keep_depth``.
    """
    rotated = mesh.transformed(view.rotation)
    placed, frame = normalize_to_frame(rotated, cfg.r_out, cfg.pad)
    full = voxelize_solid(placed, frame)
    cam = Camera(**default_intrinsics(cfg.image_size, cfg.distance, frame.edge),
                 translation=np.array([0.0, 0.0, cfg.distance]) - frame.center)
    depth = render_depth(placed, cam)
    points = cam.to_world(depth_to_pointcloud(depth, cam))
    partial, dropped = pointcloud_to_grid(points, frame, cfg.r_in)
    if keep_depth:
        return partial, full, frame, dropped, depth
    return partial, full, frame, dropped


def synth_pairs(meshes: Iterable[tuple[str, str, TriangleMesh]], cfg: ViewConfig,
                seed: int, keep_depth: bool = False) -> tuple[list[DatasetPair], Manifest, int]:
    """Generate all pairs for (category, model_id, mesh) triples.

    Returns the pairs, their manifest and the number of skipped meshes/pairs.
    """
    by_cat: dict[str, list[tuple[str, TriangleMesh]]] = {}
    for cat, model_id, mesh in meshes:
        by_cat.setdefault(cat, []).append((model_id, mesh))
    train_views, cross_views = view_sets(cfg)
    pairs, skipped = [], 0
    for ci, cat in enumerate(sorted(by_cat)):
        models = sorted(by_cat[cat], key=lambda m: m[0])
        ids = [m for m, _ in models]
        cat_seed = int(np.random.SeedSequence([seed, ci]).generate_state(1)[0])
        if len(ids) >= sum(r > 0 for r in cfg.ratios):
            assign = split_models(ids, cfg.ratios, cat_seed)
        else:
            log.warning("category %s has only %d models; filling train, test, val in order",
                        cat, len(ids))
            order = [s for s in ("train", "test", "val") if cfg.ratios[MODEL_SPLITS.index(s)] > 0]
            assign = dict(zip(ids, order))
        for model_id, mesh in models:
            role = assign[model_id]
            jobs = [("train" if role == "train" else f"{role}-SV", v) for v in train_views]
            if role != "train":
                jobs += [(f"{role}-CV", v) for v in cross_views]
            for split, view in jobs:
                try:
                    partial, full, frame, _, depth = scan_pair(mesh, view, cfg, keep_depth=True)
                except GeometryError as exc:
                    log.warning("skipping %s/%s: %s", cat, model_id, exc)
                    skipped += len(jobs)
                    break
                if not partial.data.any() or not full.data.any():
                    log.warning("skipping %s/%s view %s: empty grid", cat, model_id, view.view_id())
                    skipped += 1
                    continue
                pairs.append((split, DatasetPair(partial, full, cat, model_id, view.view_id(), frame,
                                                  depth if keep_depth else None)))
    if not pairs:
        raise PipelineError("no pairs survived synthesis")
    pairs.sort(key=lambda sp: (sp[1].category, sp[1].model_id, sp[1].view_id))
    manifest = Manifest(seed=seed, entries=[
        Entry(f"{p.category}/{p.model_id}/{p.view_id}", split, p.category, p.model_id, p.view_id)
        for split, p in pairs])
    return [p for _, p in pairs], manifest, skipped


def write_dataset(pairs: Sequence[DatasetPair], manifest: Manifest, root: str | Path) -> None:
    root = Path(root)
    for pair, entry in zip(pairs, manifest.entries):
        base = root / entry.path
        base.parent.mkdir(parents=True, exist_ok=True)
        write_grid(pair.partial, f"{base}.partial.rgpp")
        write_grid(pair.full, f"{base}.full.rgpp")
        if pair.depth is not None:
            write_depth_pgm(pair.depth, f"{base}.depth.pgm")
    write_manifest(manifest, root / "manifest.tsv")


def load_mesh_dir(root: str | Path) -> tuple[list[tuple[str, str, TriangleMesh]], int]:
    """Read ``<root>/<category>/<model>.obj``; unreadable files are logged and counted."""
    out, bad = [], 0
    for path in sorted(Path(root).glob("*/*.obj")):
        try:
            out.append((path.parent.name, path.stem, load_obj(path)))
        except (ObjParseError, GeometryError, UnicodeDecodeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            bad += 1
    return out, bad
