"""Confusion-matrix segmentation metrics.

Rows of the matrix are ground truth, columns are predictions; class 0 is
background and counts toward mIoU. Degenerate denominators are reported
as flagged values instead of NaN.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np


class ConfusionMatrix:
    def __init__(self, num_labels: int, counts: np.ndarray | None = None):
        self.num_labels = num_labels
        self.counts = np.zeros((num_labels, num_labels), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        n = self.num_labels
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} label outside [0, {n - 1}]")
        idx = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_labels, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self, c: int) -> int:
        return int(self.counts[c, c])

    def fp(self, c: int) -> int:
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def fn(self, c: int) -> int:
        return int(self.counts[c, :].sum() - self.counts[c, c])


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float, bool]:
    """Per-class IoU (NaN where the union is empty), mean IoU, and an undefined flag.

    Classes with an empty union are left out of the mean; an all-zero
    matrix gives ``(…, 0.0, True)``.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(0) + c.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    valid = union > 0
    if not valid.any():
        return iou, 0.0, True
    return iou, float(iou[valid].mean()), False


def confusion_ratio(cm: ConfusionMatrix, c: int) -> tuple[float, bool]:
    """FP/TP for class ``c``; TP == 0 gives ``(inf, True)``."""
    tp, fp = cm.tp(c), cm.fp(c)
    if tp == 0:
        return math.inf, True
    return fp / tp, False


def precision_recall(cm: ConfusionMatrix, c: int) -> tuple[float, float, bool]:
    """Precision, recall, and whether either hit a 0/0 (reported as 0)."""
    tp, fp, fn = cm.tp(c), cm.fp(c), cm.fn(c)
    flagged = False
    if tp + fp:
        prec = tp / (tp + fp)
    else:
        prec, flagged = 0.0, True
    if tp + fn:
        rec = tp / (tp + fn)
    else:
        rec, flagged = 0.0, True
    return prec, rec, flagged


@dataclass
class MetricsReport:
    iou: np.ndarray
    miou: float
    precision: np.ndarray
    recall: np.ndarray
    confusion_ratio: np.ndarray
    flags: dict[str, bool] = field(default_factory=dict)

    @property
    def mean_precision(self) -> float:
        return float(np.mean(self.precision[1:])) if len(self.precision) > 1 else 0.0

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recall[1:])) if len(self.recall) > 1 else 0.0

    @property
    def fg_confusion_ratio(self) -> float:
        """Mean FP/TP over foreground classes that have any true positive."""
        r = self.confusion_ratio[1:]
        r = r[np.isfinite(r)]
        return float(r.mean()) if r.size else math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,iou,precision,recall,confusion_ratio\n")
        for c in range(len(self.iou)):
            buf.write(f"{c},{_fmt(self.iou[c])},{_fmt(self.precision[c])},"
                      f"{_fmt(self.recall[c])},{_fmt(self.confusion_ratio[c])}\n")
        buf.write(f"mean,{_fmt(self.miou)},{_fmt(self.mean_precision)},"
                  f"{_fmt(self.mean_recall)},{_fmt(self.fg_confusion_ratio)}\n")
        return buf.getvalue()


def _fmt(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    return repr(v)


def report(cm: ConfusionMatrix) -> MetricsReport:
    iou, m, empty = miou(cm)
    n = cm.num_labels
    prec, rec, ratio = np.zeros(n), np.zeros(n), np.zeros(n)
    flags = {"empty": empty}
    for c in range(n):
        prec[c], rec[c], f1 = precision_recall(cm, c)
        ratio[c], f2 = confusion_ratio(cm, c)
        flags[f"class{c}"] = f1 or f2
    return MetricsReport(iou, m, prec, rec, ratio, flags)
