"""Confusion-matrix based segmentation scores and classification accuracy."""
import csv

import numpy as np


class ConfusionMatrix:
    """``counts[i, j]`` = number of pixels of true class i predicted as j."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, gt, pred, ignore_label=None):
        """Add one (or a batch of) label maps; returns self."""
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        if ignore_label is not None:
            keep = gt != ignore_label
            gt, pred = gt[keep], pred[keep]
        n = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= n or pred.min() < 0 or pred.max() >= n):
            raise ValueError(f"label outside [0, {n})")
        self.counts += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def per_class_iou(self):
        """IoU per class; NaN where the class is absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=1) + self.counts.sum(axis=0) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def mean_iou(self):
        iou = self.per_class_iou()
        if np.all(np.isnan(iou)):
            raise ValueError("mean IoU undefined: no class present")
        return float(np.nanmean(iou))

    def pixel_accuracy(self):
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)


def accumulate(cm, gt, pred, ignore_label=None):
    return cm.accumulate(gt, pred, ignore_label)


def mean_iou(cm):
    return cm.mean_iou()


def segmentation_scores(gt, pred, num_classes, ignore_label=None):
    cm = ConfusionMatrix(num_classes).accumulate(gt, pred, ignore_label)
    return cm.mean_iou(), cm.pixel_accuracy(), cm


def accuracy(preds, gts):
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError("length mismatch")
    if preds.size == 0:
        raise ValueError("accuracy of empty input")
    return float(np.mean(preds == gts))


def flip_analysis(before, after, gt):
    """Masks of pixels corrected (wrong -> right) and corrupted (right -> wrong)."""
    before, after, gt = np.asarray(before), np.asarray(after), np.asarray(gt)
    if not (before.shape == after.shape == gt.shape):
        raise ValueError("flip_analysis needs equal shapes")
    ok_before, ok_after = before == gt, after == gt
    return ~ok_before & ok_after, ok_before & ~ok_after


def write_iou_csv(path, cm, class_names=None):
    """Rows ``class,iou`` per class followed by ``mean``."""
    iou = cm.per_class_iou()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for i, v in enumerate(iou):
            name = class_names[i] if class_names else str(i)
            w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["mean", f"{cm.mean_iou():.6f}"])
