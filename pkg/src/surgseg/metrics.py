"""Confusion-matrix segmentation metrics (IoU, Dice) and report writers."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EmptyEvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise ValueError(f"counts shape {self.counts.shape} != {self.num_classes}^2")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    merge = __add__

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_index: int = 255) -> ConfusionMatrix:
    """Return ``cm`` plus the tally of one (pred, gt) pair. ``cm`` is not modified."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt sizes differ: {pred.size} vs {gt.size}")
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    K = cm.num_classes
    for name, arr in (("gt", gt), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            bad = arr[(arr < 0) | (arr >= K)][0]
            raise ValueError(f"{name} label {bad} outside [0, {K})")
    tally = np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(K, cm.counts + tally)


def _stats(cm):
    tp = np.diag(cm.counts).astype(np.float64)
    row = cm.counts.sum(1).astype(np.float64)
    col = cm.counts.sum(0).astype(np.float64)
    return tp, row, col


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; NaN where the class is absent from both gt and pred."""
    tp, row, col = _stats(cm)
    denom = row + col - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def dice_per_class(cm: ConfusionMatrix) -> np.ndarray:
    tp, row, col = _stats(cm)
    denom = row + col
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, np.nan)


def _mean(values, include_background):
    v = values if include_background else values[1:]
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise EmptyEvaluationError("empty evaluation: no class is defined")
    return float(v.mean())


def miou(cm: ConfusionMatrix, include_background: bool = True) -> float:
    return _mean(iou_per_class(cm), include_background)


def mean_dice(cm: ConfusionMatrix, include_background: bool = True) -> float:
    return _mean(dice_per_class(cm), include_background)


def build_report(cm: ConfusionMatrix, names=None, include_background=True, config=None) -> dict:
    names = names or [str(k) for k in range(cm.num_classes)]
    iou, dice = iou_per_class(cm), dice_per_class(cm)
    rows = []
    for k in range(cm.num_classes):
        defined = not np.isnan(iou[k])
        rows.append({
            "id": k,
            "name": names[k],
            "iou": float(iou[k]) if defined else None,
            "dice": float(dice[k]) if defined else None,
            "defined": defined,
            "gt_pixels": int(cm.counts[k].sum()),
            "pred_pixels": int(cm.counts[:, k].sum()),
        })
    return {
        "per_class": rows,
        "miou": miou(cm, include_background),
        "mean_dice": mean_dice(cm, include_background),
        "include_background": include_background,
        "scored_pixels": cm.total,
        "confusion_matrix": cm.counts.tolist(),
        "config": config or {},
    }


def write_report(report: dict, stem) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and a per-class ``<stem>.csv``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    jpath, cpath = stem.with_suffix(".json"), stem.with_suffix(".csv")
    jpath.write_text(json.dumps(report, indent=2))
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class", "IoU", "Dice"])
        for r in report["per_class"]:
            w.writerow([r["id"], r["name"],
                        "" if r["iou"] is None else f"{r['iou']:.4f}",
                        "" if r["dice"] is None else f"{r['dice']:.4f}"])
        w.writerow(["", "mean", f"{report['miou']:.4f}", f"{report['mean_dice']:.4f}"])
    return jpath, cpath
