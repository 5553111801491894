"""Pixel-wise evaluation: confusion counting and the derived scores.

Counts are associative, so tiled evaluation accumulates partial counts and
applies the formulas once at the end (micro-averaging).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import Tensor


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class MetricSummary(NamedTuple):
    precision: float
    recall: float
    f1: float
    iou: float
    degenerate: bool = False

    def as_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "iou": self.iou}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def confusion_counts(pred_logits, target, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize sigmoid(logits) at ``threshold`` and count against the mask."""
    logits = pred_logits.data if isinstance(pred_logits, Tensor) else np.asarray(pred_logits)
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.shape != y.shape:
        raise ValueError(f"prediction shape {logits.shape} does not match target shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("target mask must contain only 0 and 1")
    pred = _sigmoid(logits) >= threshold
    truth = y.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, tn, fn)


def metrics_from_counts(counts: ConfusionCounts) -> MetricSummary:
    """Precision, recall, F1 and IoU; empty denominators score 0 with a warning."""
    degenerate = False

    def ratio(num: int, den: int) -> float:
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp)
    recall = ratio(counts.tp, counts.tp + counts.fn)
    f1 = ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)
    iou = ratio(counts.tp, counts.tp + counts.fn + counts.fp)
    if degenerate:
        warnings.warn("metric denominator was zero (empty prediction or mask); reporting 0", stacklevel=2)
    return MetricSummary(precision, recall, f1, iou, degenerate)


def format_report(summary: MetricSummary, counts: ConfusionCounts | None = None) -> str:
    lines = [
        "metric     value",
        "---------  ------",
        f"precision  {summary.precision:.4f}",
        f"recall     {summary.recall:.4f}",
        f"f1         {summary.f1:.4f}",
        f"iou        {summary.iou:.4f}",
    ]
    if counts is not None:
        lines.append(f"pixels     {counts.total}")
    return "\n".join(lines)


def write_metrics_file(path, summary: MetricSummary) -> None:
    """Machine-readable key=value dump, four decimal places."""
    with open(path, "w") as fh:
        for key, value in summary.as_dict().items():
            fh.write(f"{key}={value:.4f}\n")
