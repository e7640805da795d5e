"""Segmentation loss and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor.core import Tensor, log_softmax, mean, mul, tsum

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


def weighted_cross_entropy(logits: Tensor, mask: np.ndarray, class_weights: Sequence[float] = (1.0, 5.0)) -> Tensor:
    """Mean over pixels of ``w[class] * -log softmax(logits)[class]``."""
    if logits.ndim != 4 or logits.shape[1] != len(class_weights):
        raise ValueError(f"logits must be (N, {len(class_weights)}, H, W), got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("logits contain non-finite values")
    weights = np.asarray(class_weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError(f"class weights must be positive, got {class_weights}")
    mask = np.asarray(mask).astype(np.intp)
    onehot = np.stack([mask == c for c in range(len(weights))], axis=1)
    coef = (onehot * weights.reshape(1, -1, 1, 1)).astype(logits.dtype)
    picked = tsum(mul(log_softmax(logits, axis=1), coef), axis=1)
    return mul(mean(picked), -1.0)


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Class with the highest logit per pixel (ties go to background)."""
    return np.argmax(logits, axis=1).astype(np.uint8)


def class_iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    p, g = pred == cls, gt == cls
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def mean_iou(pred_mask: np.ndarray, gt_mask: np.ndarray, num_classes: int = 2) -> float:
    """Mean over classes of intersection over union; an absent class scores 1."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    return float(np.mean([class_iou(pred_mask, gt_mask, c) for c in range(num_classes)]))


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=_CROSS)
    return [labels == i for i in range(1, n + 1)]


def match_objects(pred: np.ndarray, gt: np.ndarray) -> tuple[list[float], int, int]:
    """Greedy one-to-one matching of components by descending IoU.

    Returns the IoUs of matched pairs and the predicted / ground-truth object counts.
    """
    preds, gts = connected_components(pred), connected_components(gt)
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            inter = np.logical_and(p, g).sum()
            if inter:
                pairs.append((inter / np.logical_or(p, g).sum(), i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, ious = set(), set(), []
    for iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        ious.append(float(iou))
    return ious, len(preds), len(gts)


@dataclass
class EvalReport:
    mean_iou: float
    pr_points: list[tuple[float, float, float]] = field(default_factory=list)
    counts: list[tuple[int, int, int]] = field(default_factory=list)   # (TP, FP, FN) per threshold

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "tp", "fp", "fn"])
            for (t, p, r), (tp, fp, fn) in zip(self.pr_points, self.counts):
                w.writerow([f"{t:.6g}", f"{p:.10g}", f"{r:.10g}", tp, fp, fn])


def read_pr_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def pr_curve(pred_masks: np.ndarray, gt_masks: np.ndarray, thresholds: Sequence[float]) -> EvalReport:
    """Object-level precision and recall at each IoU threshold.

    A matched pair is a true positive at threshold ``t`` iff its IoU is at
    least ``t``. Precision is 1 when nothing is predicted; recall is 1 when
    there is nothing to find.
    """
    thresholds = [float(t) for t in thresholds]
    if any(not 0 < t <= 1 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1]")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    pred_masks, gt_masks = np.asarray(pred_masks), np.asarray(gt_masks)
    if pred_masks.ndim == 2:
        pred_masks, gt_masks = pred_masks[None], gt_masks[None]
    all_ious: list[float] = []
    n_pred = n_gt = 0
    for p, g in zip(pred_masks, gt_masks):
        ious, np_, ng = match_objects(p, g)
        all_ious.extend(ious)
        n_pred += np_
        n_gt += ng
    ious = np.asarray(all_ious)
    points, counts = [], []
    for t in thresholds:
        tp = int((ious >= t).sum())
        fp, fn = n_pred - tp, n_gt - tp
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn) if tp + fn else 1.0
        points.append((t, precision, recall))
        counts.append((tp, fp, fn))
    return EvalReport(mean_iou(pred_masks, gt_masks), points, counts)


DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.1, 0.95, 0.1), 2))
