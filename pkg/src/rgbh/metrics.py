"""Confusion-matrix accumulation and segmentation metrics.

The ConfusionMatrix is a value type: update() and merge() return new
matrices, so per-tile accumulation can run sharded and be merged at the
end with bit-identical results to a single pass.

Metric definitions:

* IoU_c  = TP_c / (TP_c + FP_c + FN_c)
* Acc_c  = TP_c / (TP_c + FN_c)   (per-class ground-truth recall)
* mIoU / mAcc are unweighted means over *present* classes: a class with a
  zero denominator reports None and is excluded from the mean rather than
  scored zero, so tiles lacking a class are not penalized.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import NUM_CLASSES, REPORT_CLASS_NAMES
from .errors import ClassCountMismatch, LabelOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are prediction."""

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    )

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeMismatch(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise LabelOutOfRange("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update(
    cm: ConfusionMatrix,
    pred: np.ndarray,
    gt: np.ndarray,
    ignore_index: int = 255,
) -> ConfusionMatrix:
    """Count (gt, pred) pairs over non-ignored pixels into a new matrix."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    c = cm.num_classes
    keep = gt != ignore_index
    p, g = pred[keep].ravel(), gt[keep].ravel()
    if p.size and ((p < 0) | (p >= c)).any():
        raise LabelOutOfRange(f"prediction labels outside 0..{c - 1}")
    if g.size and ((g < 0) | (g >= c)).any():
        raise LabelOutOfRange(f"ground-truth labels outside 0..{c - 1}")
    flat = np.bincount(g.astype(np.int64) * c + p.astype(np.int64), minlength=c * c)
    return ConfusionMatrix(cm.counts + flat.reshape(c, c))


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ClassCountMismatch(f"{a.num_classes} vs {b.num_classes} classes")
    return ConfusionMatrix(a.counts + b.counts)


def per_class_iou(cm: ConfusionMatrix) -> list:
    """IoU per class; None where the class is absent (zero denominator)."""
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    return [
        (int(tp[i]) / int(denom[i])) if denom[i] > 0 else None
        for i in range(cm.num_classes)
    ]


def mean_iou(cm: ConfusionMatrix) -> Optional[float]:
    vals = [v for v in per_class_iou(cm) if v is not None]
    return sum(vals) / len(vals) if vals else None


def per_class_acc(cm: ConfusionMatrix) -> list:
    """Recall per class; None where the class never occurs in ground truth."""
    tp = np.diag(cm.counts)
    support = cm.counts.sum(axis=1)
    return [
        (int(tp[i]) / int(support[i])) if support[i] > 0 else None
        for i in range(cm.num_classes)
    ]


def mean_acc(cm: ConfusionMatrix) -> Optional[float]:
    vals = [v for v in per_class_acc(cm) if v is not None]
    return sum(vals) / len(vals) if vals else None


# --- reporting ---------------------------------------------------------------

def report_dict(cm: ConfusionMatrix) -> dict:
    """Full metrics report: per-class values, means, raw counts."""
    return {
        "classes": list(REPORT_CLASS_NAMES[: cm.num_classes]),
        "iou": per_class_iou(cm),
        "acc": per_class_acc(cm),
        "miou": mean_iou(cm),
        "macc": mean_acc(cm),
        "pixels": cm.total,
        "confusion": cm.counts.tolist(),
    }


def report_json(cm: ConfusionMatrix) -> str:
    return json.dumps(report_dict(cm), indent=1, sort_keys=True)


CSV_HEADER = ["metric"] + [n.lower() for n in REPORT_CLASS_NAMES] + ["mean"]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def report_csv_rows(cm: ConfusionMatrix, label: str = "") -> list:
    """Two delimited rows (iou, acc) in the fixed class-column order."""
    prefix = [label] if label else []
    iou = per_class_iou(cm)
    acc = per_class_acc(cm)
    return [
        prefix + ["iou"] + [_fmt(v) for v in iou] + [_fmt(mean_iou(cm))],
        prefix + ["acc"] + [_fmt(v) for v in acc] + [_fmt(mean_acc(cm))],
    ]


def report_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(report_csv_rows(cm))
    return buf.getvalue()
