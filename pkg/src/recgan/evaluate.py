"""Evaluation protocol: threshold search on validation pairs, metrics on a test split."""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

from .dataset import Entry, Manifest, ManifestError, load_pair
from .grid import MetricsReport, OccupancyGrid, ProbGrid, search_threshold, summarize

Predictor = Callable[[Sequence[OccupancyGrid]], list[ProbGrid]]
TEST_SPLITS = ("test-SV", "test-CV")


def _run(root, entries: Sequence[Entry], predictor: Predictor | None):
    pairs = [load_pair(root, e) for e in entries]
    gts = [gt for _, gt in pairs]
    if predictor is None:
        return [g.to_prob() for g in gts], gts
    return predictor([x for x, _ in pairs]), gts


def evaluate(root: str | Path, manifest: Manifest, predictor: Predictor | None,
             split: str) -> tuple[list[MetricsReport], list[MetricsReport]]:
    """Per-category reports at per-category thresholds, and the same at one global threshold.

    Thresholds are searched on the matching validation split (val-SV for
    test-SV, val-CV for test-CV). A category without validation pairs falls
    back to the global threshold. ``predictor=None`` scores the ground truth
    against itself.
    """
    if split not in TEST_SPLITS:
        raise ValueError(f"split must be one of {TEST_SPLITS}, got {split!r}")
    val_split = "val-" + split.split("-")[1]
    test = manifest.select(split)
    val = manifest.select(val_split)
    if not test:
        raise ManifestError(f"manifest has no {split} pairs")
    if not val:
        raise ManifestError(f"manifest has no {val_split} pairs to search a threshold on")

    val_preds, val_gts = _run(root, val, predictor)
    p_global = search_threshold(val_preds, val_gts)
    val_by_cat: dict[str, tuple[list, list]] = {}
    for e, y, g in zip(val, val_preds, val_gts):
        bucket = val_by_cat.setdefault(e.category, ([], []))
        bucket[0].append(y)
        bucket[1].append(g)

    per_cat, global_ = [], []
    for cat in sorted({e.category for e in test}):
        preds, gts = _run(root, [e for e in test if e.category == cat], predictor)
        p_cat = search_threshold(*val_by_cat[cat]) if cat in val_by_cat else p_global
        per_cat.append(summarize(cat, preds, gts, p_cat))
        global_.append(summarize(cat, preds, gts, p_global))
    return per_cat, global_
