"""Confusion-matrix segmentation metrics: per-class IoU/Dice, means, pixel accuracy."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch


class ConfusionMatrix:
    """C x C counts with rows = ground truth, cols = prediction; merges by addition."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def accumulate(self, pred_labels, gt_labels) -> "ConfusionMatrix":
        """Add one (prediction, ground truth) label pair; ignored pixels skipped."""
        pred = self._as_array(pred_labels)
        gt = self._as_array(gt_labels)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != self.ignore_index
        self.ignored += int((~valid).sum())
        gt_v, pred_v = gt[valid], pred[valid]
        if gt_v.size and (gt_v.min() < 0 or gt_v.max() >= self.num_classes):
            raise ValueError("ground-truth labels outside [0, num_classes)")
        if pred_v.size and (pred_v.min() < 0 or pred_v.max() >= self.num_classes):
            raise ValueError("predicted labels outside [0, num_classes)")
        flat = gt_v.astype(np.int64) * self.num_classes + pred_v.astype(np.int64)
        binned = np.bincount(flat, minlength=self.num_classes**2)
        self.counts += binned.reshape(self.num_classes, self.num_classes)
        return self

    @staticmethod
    def _as_array(x) -> np.ndarray:
        if torch.is_tensor(x):
            return x.detach().cpu().numpy()
        return np.asarray(x)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        self.counts += other.counts
        self.ignored += other.ignored
        return self

    def total(self) -> int:
        return int(self.counts.sum())


def metrics(cm: ConfusionMatrix, class_mean_accuracy: bool = False) -> dict:
    """Per-class IoU and Dice, their means over present classes, and accuracy.

    A class counts as present when TP + FP + FN > 0; absent classes are
    reported as NaN and excluded from the means. An empty matrix flags every
    metric as undefined (valid=False, NaN values).
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom_iou = tp + fp + fn
    present = denom_iou > 0
    iou = np.full(cm.num_classes, np.nan)
    dice = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denom_iou[present]
    dice[present] = 2 * tp[present] / (2 * tp[present] + fp[present] + fn[present])
    if total == 0:
        accuracy = math.nan
        miou = math.nan
        mean_dice = math.nan
    else:
        if class_mean_accuracy:
            gt_totals = counts.sum(axis=1)
            has_gt = gt_totals > 0
            accuracy = float(np.mean(tp[has_gt] / gt_totals[has_gt]))
        else:
            accuracy = float(tp.sum() / total)
        miou = float(np.mean(iou[present]))
        mean_dice = float(np.mean(dice[present]))
    return {
        "iou": iou.tolist(),
        "dice": dice.tolist(),
        "miou": miou,
        "mean_dice": mean_dice,
        "accuracy": accuracy,
        "present": present.tolist(),
        "pixels": int(total),
        "ignored": cm.ignored,
        "valid": bool(total > 0),
    }


def format_report(report: dict, class_names: list[str] | None = None) -> str:
    """Human-readable per-class + summary block."""
    n = len(report["iou"])
    names = class_names or [f"class_{i}" for i in range(n)]
    lines = [f"{'class':<12}{'IoU':>9}{'Dice':>9}{'present':>9}"]
    for i in range(n):
        iou, dice = report["iou"][i], report["dice"][i]
        lines.append(f"{names[i]:<12}{iou:>9.4f}{dice:>9.4f}{str(report['present'][i]):>9}")
    lines.append(f"mIoU {report['miou']:.4f} | mean Dice {report['mean_dice']:.4f} "
                 f"| accuracy {report['accuracy']:.4f} | pixels {report['pixels']} "
                 f"| ignored {report['ignored']}")
    return "\n".join(lines)


def save_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1))
