"""Confusion-matrix metrics and sliding-window inference."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import data as dat
from . import model as mod
from .errors import ArgumentError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)  # rows = ground truth, cols = prediction

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ArgumentError("counts shape does not match num_classes")
            if (self.counts < 0).any():
                raise ArgumentError("negative counts")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ArgumentError("class count mismatch")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def confusion_update(
    cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray, ignore_index: int = dat.IGNORE_INDEX
) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ArgumentError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = gt != ignore_index
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    k = cm.num_classes
    if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
        raise ArgumentError("class index out of range")
    binned = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    cm.counts += binned
    return cm


def _tp_fp_fn(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0).astype(np.float64) - tp
    fn = cm.counts.sum(axis=1).astype(np.float64) - tp
    return tp, fp, fn


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU and their mean; zero-denominator classes are excluded

    from the mean (and reported as nan).
    """
    if cm.counts.sum() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    tp, fp, fn = _tp_fp_fn(cm)
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    if not present.any():
        raise UndefinedMetricError("no class present in prediction or ground truth")
    return per_class.tolist(), float(per_class[present].mean())


def dice(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class Dice coefficient; mean over foreground classes (index >= 1)."""
    if cm.counts.sum() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    tp, fp, fn = _tp_fp_fn(cm)
    denom = 2 * tp + fp + fn
    per_class = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), np.nan)
    fg = per_class[1:]
    fg = fg[~np.isnan(fg)]
    if fg.size == 0:
        raise UndefinedMetricError("no foreground class present")
    return per_class.tolist(), float(fg.mean())


def cd_metrics(cm: ConfusionMatrix) -> tuple[float, float]:
    """Change-detection pair: IoU of the changed class (1) and overall accuracy."""
    if cm.num_classes != 2:
        raise ArgumentError(f"change-detection metrics need 2 classes, got {cm.num_classes}")
    total = cm.counts.sum()
    if total == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    tp, fp, fn = _tp_fp_fn(cm)
    denom = tp[1] + fp[1] + fn[1]
    changed_iou = float(tp[1] / denom) if denom > 0 else 0.0
    overall = float(np.diag(cm.counts).sum() / total)
    return changed_iou, overall


def sliding_window_predict(
    model, image: torch.Tensor, window: int, stride: int | None = None
) -> torch.Tensor:
    """Average class probabilities over overlapping windows, renormalized.

    Windows are placed on a stride grid and clamped inside the image so every
    pixel is covered; a window at least as large as the image degenerates to
    a single whole-image prediction.
    """
    if stride is None:
        stride = max(1, (2 * window) // 3)
    if window < 1 or stride < 1 or stride > window:
        raise ArgumentError("need window >= stride >= 1")
    h, w = image.shape[-2:]
    if window >= h and window >= w:
        return mod.predict(model, image)

    def starts(extent):
        if window >= extent:
            return [0]
        ss = list(range(0, extent - window + 1, stride))
        if ss[-1] != extent - window:
            ss.append(extent - window)
        return ss

    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    n = x.shape[0]
    k = model.cfg.num_classes
    acc = torch.zeros((n, k, h, w), dtype=x.dtype)
    hits = torch.zeros((1, 1, h, w), dtype=x.dtype)
    for top in starts(h):
        for left in starts(w):
            tile = x[..., top : top + min(window, h), left : left + min(window, w)]
            probs = mod.predict(model, tile)
            acc[..., top : top + window, left : left + window] += probs
            hits[..., top : top + window, left : left + window] += 1
    acc = acc / hits
    acc = acc / acc.sum(dim=1, keepdim=True)
    return acc.squeeze(0) if squeeze else acc


def evaluate_index(
    model,
    index: dat.DatasetIndex,
    ids: list[int] | None = None,
    window: int | None = None,
    stride: int | None = None,
) -> dict:
    """Score every (or the given) masked item; returns metrics + the matrix."""
    model.eval()
    cm = ConfusionMatrix(index.num_classes)
    ids = ids if ids is not None else [i for i in range(len(index)) if index.items[i].mask is not None]
    if not ids:
        raise ArgumentError("no items with masks to evaluate")
    with torch.no_grad():
        for i in ids:
            mask_path = index.mask_path(i)
            if mask_path is None:
                raise ArgumentError(f"item {index.items[i].image} has no mask")
            image = torch.from_numpy(dat.load_image(index.image_path(i)))
            gt = dat.load_mask(mask_path)
            if window is not None:
                probs = sliding_window_predict(model, image, window, stride)
            else:
                probs = mod.predict(model, image)
            pred = probs.argmax(dim=0).numpy()
            confusion_update(cm, pred, gt, index.ignore_index)
    per_class, mean = miou(cm)
    result = {
        "n_items": len(ids),
        "per_class_iou": per_class,
        "miou": mean,
        "confusion": cm.counts.tolist(),
    }
    if index.num_classes == 2:
        changed, overall = cd_metrics(cm)
        result["changed_iou"] = changed
        result["overall_accuracy"] = overall
    return result


def write_report(result: dict, path: str, meta: dict | None = None) -> None:
    """Plain-text report: per-class IoU table, mean, run metadata."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    lines = ["evaluation report", "=" * 17, ""]
    for key, value in (meta or {}).items():
        lines.append(f"{key}: {value}")
    if meta:
        lines.append("")
    lines.append(f"items evaluated: {result['n_items']}")
    lines.append("")
    lines.append("class  iou")
    for c, iou in enumerate(result["per_class_iou"]):
        lines.append(f"{c:5d}  {'n/a' if iou != iou else f'{iou:.4f}'}")
    lines.append("")
    lines.append(f"mean iou: {result['miou']:.4f}")
    if "changed_iou" in result:
        lines.append(f"changed iou: {result['changed_iou']:.4f}")
        lines.append(f"overall accuracy: {result['overall_accuracy']:.4f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.splitext(path)[0] + ".json", "w") as f:
        json.dump(result, f, indent=1)
