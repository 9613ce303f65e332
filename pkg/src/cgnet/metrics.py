"""Confusion-matrix accumulation and change-detection metrics.

Metrics are computed from global counts over a whole split (one confusion
matrix, not per-image averages); the positive class is "changed". Degenerate
0/0 ratios are defined as 0 so empty-change tiles aggregate stably.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError


@dataclass(frozen=True)
class ConfusionCounts:
    """TP/TN/FP/FN pixel counts; merge shards with ``+``."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InputError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            tn=self.tn + other.tn,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricReport:
    f1: float
    precision: float
    recall: float
    iou: float


@dataclass(frozen=True)
class DatasetStats:
    changed_pixels: int
    unchanged_pixels: int


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Exact confusion counts of two binary masks (changed = 1)."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise InputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise InputError("masks are empty")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise InputError("masks must contain only 0 and 1")
    p = p.astype(bool)
    g = g.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def iou_from_f1(f1: float) -> float:
    """IoU implied by an F1 value: f1 / (2 - f1)."""
    return f1 / (2.0 - f1)


def compute_metrics(counts: ConfusionCounts) -> MetricReport:
    """Precision, recall, F1, IoU from counts; 0/0 ratios resolve to 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    iou = tp / (tp + fn + fp) if tp + fn + fp else 0.0
    return MetricReport(
        f1=f1_score(precision, recall), precision=precision, recall=recall, iou=iou
    )


def imbalance_ratio(stats: DatasetStats) -> float:
    """Unchanged-to-changed pixel ratio (the R of "1:R")."""
    if stats.changed_pixels <= 0:
        raise DomainError("imbalance ratio is undefined without changed pixels")
    return stats.unchanged_pixels / stats.changed_pixels


def format_imbalance(ratio: float) -> str:
    return f"1:{ratio:.2f}"


def report_as_dict(report: MetricReport, counts: ConfusionCounts | None = None) -> dict:
    """Flat machine-readable form: raw fractions plus raw counts."""
    out = {
        "f1": report.f1,
        "precision": report.precision,
        "recall": report.recall,
        "iou": report.iou,
    }
    if counts is not None:
        out.update(tp=counts.tp, tn=counts.tn, fp=counts.fp, fn=counts.fn)
    return out


def format_report(report: MetricReport) -> str:
    """Human-readable percent form with 2 decimals."""
    return (
        f"F1 {report.f1 * 100:.2f}  Pre. {report.precision * 100:.2f}  "
        f"Rec. {report.recall * 100:.2f}  IoU {report.iou * 100:.2f}"
    )
