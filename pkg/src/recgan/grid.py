"""Voxel grids, the RGPP file format and reconstruction metrics.

Grids are held in memory as numpy arrays indexed ``[z, y, x]`` so that a
C-order flatten yields the on-disk X-fastest voxel ordering.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"RGPP"
VERSION = 1
KIND_OCCUPANCY = 0
KIND_PROBABILITY = 1
_HEADER = struct.Struct("<4sHBBI")

CE_CLAMP = 1e-7
THRESHOLDS = tuple(round(0.10 + 0.05 * k, 2) for k in range(17))
REPORT_HEADER = ("category", "n", "iou", "ce", "precision", "recall", "threshold")


class GridError(ValueError):
    pass


class DimensionError(GridError):
    pass


class FormatError(GridError):
    pass


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _check_resolution(r: int) -> None:
    if not is_power_of_two(r) or r < 4:
        raise GridError(f"resolution must be a power of two >= 4, got {r}")


@dataclass
class OccupancyGrid:
    """Binary voxel grid. ``data`` is a bool array of shape (r, r, r)."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise DimensionError(f"grid must be a cube, got shape {data.shape}")
        _check_resolution(data.shape[0])
        if data.dtype != np.bool_:
            if not np.isin(data, (0, 1)).all():
                raise GridError("occupancy values must be 0 or 1")
            data = data.astype(bool)
        self.data = data

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @classmethod
    def empty(cls, r: int) -> "OccupancyGrid":
        return cls(np.zeros((r, r, r), dtype=bool))

    def packed(self) -> bytes:
        return np.packbits(self.data.ravel(), bitorder="little").tobytes()

    def to_prob(self) -> "ProbGrid":
        return ProbGrid(self.data.astype(np.float32))

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass
class ProbGrid:
    """Per-voxel occupancy probabilities in [0, 1], shape (r, r, r)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise DimensionError(f"grid must be a cube, got shape {values.shape}")
        _check_resolution(values.shape[0])
        if not np.isfinite(values).all() or values.min() < 0 or values.max() > 1:
            raise GridError("probabilities must be finite and within [0, 1]")
        self.values = values

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def binarize(self, p: float) -> OccupancyGrid:
        return OccupancyGrid(self.values.astype(np.float64) > p)

    def __eq__(self, other):
        if not isinstance(other, ProbGrid):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass
class MetricsReport:
    category: str
    n: int
    iou: float
    ce: float
    precision: float
    recall: float
    threshold: float

    def row(self) -> list:
        return [self.category, self.n, f"{self.iou:.6f}", f"{self.ce:.6f}",
                f"{self.precision:.6f}", f"{self.recall:.6f}", f"{self.threshold:.2f}"]


# ---------------------------------------------------------------------------
# file format

def write_grid(grid: OccupancyGrid | ProbGrid, path: str | Path) -> None:
    r = grid.resolution
    if isinstance(grid, OccupancyGrid):
        kind, payload = KIND_OCCUPANCY, grid.packed()
    else:
        kind, payload = KIND_PROBABILITY, grid.values.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, kind, 0, r))
        fh.write(payload)


def read_grid(path: str | Path) -> OccupancyGrid | ProbGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind, _reserved, r = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if not is_power_of_two(r) or r < 4:
        raise FormatError(f"{path}: resolution {r} is not a power of two >= 4")
    body = raw[_HEADER.size:]
    n = r ** 3
    if kind == KIND_OCCUPANCY:
        nbytes = (n + 7) // 8
        if len(body) != nbytes:
            raise FormatError(f"{path}: expected {nbytes} payload bytes, got {len(body)}")
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little")
        if bits[n:].any():
            raise FormatError(f"{path}: nonzero pad bits")
        return OccupancyGrid(bits[:n].astype(bool).reshape(r, r, r))
    if kind == KIND_PROBABILITY:
        if len(body) != 4 * n:
            raise FormatError(f"{path}: expected {4 * n} payload bytes, got {len(body)}")
        values = np.frombuffer(body, dtype="<f4").reshape(r, r, r)
        try:
            return ProbGrid(values.astype(np.float32))
        except GridError as exc:
            raise FormatError(f"{path}: {exc}") from None
    raise FormatError(f"{path}: unknown kind byte {kind}")


# ---------------------------------------------------------------------------
# metrics

def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    # metrics also take raw cubic arrays, so grids below the r >= 4 type floor can be scored
    values = pred.values if isinstance(pred, ProbGrid) else np.asarray(pred, dtype=np.float32)
    truth = gt.data if isinstance(gt, OccupancyGrid) else np.asarray(gt).astype(bool)
    if values.shape != truth.shape:
        raise DimensionError(f"resolution mismatch: pred {values.shape} vs gt {truth.shape}")
    return values, truth


def _counts(pred: ProbGrid, gt: OccupancyGrid, p: float) -> tuple[int, int, int]:
    values, truth = _pair(pred, gt)
    if not 0 < p < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {p}")
    hit = values.astype(np.float64) > p  # exact f32 values against the unrounded threshold
    tp = int(np.count_nonzero(hit & truth))
    fp = int(np.count_nonzero(hit & ~truth))
    fn = int(np.count_nonzero(~hit & truth))
    return tp, fp, fn


def iou(pred: ProbGrid, gt: OccupancyGrid, p: float) -> float:
    tp, fp, fn = _counts(pred, gt, p)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def precision_recall(pred: ProbGrid, gt: OccupancyGrid, p: float) -> tuple[float, float]:
    tp, fp, fn = _counts(pred, gt, p)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def cross_entropy(pred: ProbGrid, gt: OccupancyGrid) -> float:
    values, truth = _pair(pred, gt)
    y = np.clip(values.astype(np.float64), CE_CLAMP, 1 - CE_CLAMP)
    t = truth.astype(np.float64)
    return float(-np.mean(t * np.log(y) + (1 - t) * np.log1p(-y)))


def search_threshold(preds: Sequence[ProbGrid], gts: Sequence[OccupancyGrid]) -> float:
    """Return the candidate threshold with the best mean IoU; ties go to the smaller one."""
    if not preds or len(preds) != len(gts):
        raise ValueError("need a nonempty list of paired predictions and ground truths")
    best_p, best = THRESHOLDS[0], -1.0
    for p in THRESHOLDS:
        score = float(np.mean([iou(y, g, p) for y, g in zip(preds, gts)]))
        if score > best:
            best_p, best = p, score
    return best_p


def summarize(category: str, preds: Sequence[ProbGrid], gts: Sequence[OccupancyGrid],
              p: float) -> MetricsReport:
    """Mean metrics over a set of pairs at a fixed threshold."""
    if not preds:
        raise ValueError(f"no pairs for category {category!r}")
    ious, ces, precs, recs = [], [], [], []
    for y, g in zip(preds, gts):
        ious.append(iou(y, g, p))
        ces.append(cross_entropy(y, g))
        pr, rc = precision_recall(y, g, p)
        precs.append(pr)
        recs.append(rc)
    return MetricsReport(category, len(preds), float(np.mean(ious)), float(np.mean(ces)),
                         float(np.mean(precs)), float(np.mean(recs)), p)


def write_report(reports: Iterable[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for rep in reports:
            writer.writerow(rep.row())
