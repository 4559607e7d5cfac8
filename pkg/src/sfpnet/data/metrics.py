"""Point-level confusion matrix and IoU."""
from __future__ import annotations

import numpy as np

from .scanio import IGNORE


class ConfusionMatrix:
    """``K x K`` counts, rows indexed by ground truth."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64))

    def accumulate(self, pred, truth, ignore_index: int = IGNORE) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64).ravel()
        truth = np.asarray(truth, dtype=np.int64).ravel()
        keep = truth != ignore_index
        pred, truth = pred[keep], truth[keep]
        k = self.num_classes
        self.counts += np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self):
        """Per-class IoU (NaN where the class never occurs) and the mIoU."""
        return iou(self)


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    return cm.accumulate(pred, truth)


def iou(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, miou
