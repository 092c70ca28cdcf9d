"""Tolerance-based precision / recall / F1 between binary BEV curb masks.

A predicted pixel is a true positive when some ground-truth pixel lies within
``tol`` pixels (Euclidean); otherwise it is a false positive. A ground-truth
pixel with no predicted pixel within ``tol`` is a false negative.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .kitti_io import atomic_write_bytes


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tolerance: float = 2.0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.tolerance != other.tolerance:
            raise ValueError("cannot add counts computed at different tolerances")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tolerance)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(mask) -> np.ndarray:
    values = getattr(mask, "values", mask)
    return np.asarray(values) > 0


def _distance_to(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from every pixel to the nearest set pixel of ``mask`` (inf if none)."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return distance_transform_edt(~mask)


def match_with_tolerance(pred, gt, tol: float = 2.0) -> ConfusionCounts:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask dimensions differ: {p.shape} vs {g.shape}")
    if tol < 0:
        raise ValueError("tolerance must be >= 0")
    near_gt = _distance_to(g)[p] <= tol
    near_pred = _distance_to(p)[g] <= tol
    return ConfusionCounts(int(near_gt.sum()), int((~near_gt).sum()), int((~near_pred).sum()), float(tol))


def compute_metrics(counts: ConfusionCounts) -> Metrics:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(precision, recall, f1)


def aggregate(per_frame: list[ConfusionCounts], averaging: str = "micro") -> Metrics:
    """Micro: sum counts then compute metrics. Macro: mean of per-frame metrics."""
    if averaging not in ("micro", "macro"):
        raise ValueError("averaging must be 'micro' or 'macro'")
    if not per_frame:
        return Metrics(0.0, 0.0, 0.0)
    if averaging == "micro":
        total = per_frame[0]
        for c in per_frame[1:]:
            total = total + c
        return compute_metrics(total)
    ms = [compute_metrics(c) for c in per_frame]
    return Metrics(*(float(np.mean([getattr(m, k) for m in ms])) for k in ("precision", "recall", "f1")))


def metrics_report(frames: dict[str, ConfusionCounts], averagings=("micro", "macro")) -> dict:
    return {
        "tolerance": next(iter(frames.values())).tolerance if frames else None,
        "frames": {
            fid: {**asdict(c), **compute_metrics(c).to_dict()} for fid, c in sorted(frames.items())
        },
        "aggregate": {a: aggregate(list(frames.values()), a).to_dict() for a in averagings},
    }


def write_metrics_json(path: str | os.PathLike, frames: dict[str, ConfusionCounts], averagings=("micro", "macro")) -> dict:
    report = metrics_report(frames, averagings)
    atomic_write_bytes(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return report


def write_metrics_csv(path: str | os.PathLike, frames: dict[str, ConfusionCounts], averagings=("micro", "macro")) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["frame", "tp", "fp", "fn", "precision", "recall", "f1"])
    for fid, c in sorted(frames.items()):
        m = compute_metrics(c)
        wr.writerow([fid, c.tp, c.fp, c.fn, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
    for a in averagings:
        agg = aggregate(list(frames.values()), a)
        wr.writerow([f"all ({a})", "", "", "", f"{agg.precision:.6f}", f"{agg.recall:.6f}", f"{agg.f1:.6f}"])
    atomic_write_bytes(path, buf.getvalue().encode())
