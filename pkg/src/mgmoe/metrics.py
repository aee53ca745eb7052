"""Dice, closed-set accuracy and multiset token precision/recall."""

from __future__ import annotations

from collections import Counter

import numpy as np


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2|P and G| / (|P| + |G|)``; two empty masks score 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dice: shapes {pred.shape} and {gt.shape} differ")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def mdice(pred_masks, gt_masks, classes=None) -> tuple[dict, float]:
    """Per-class mean dice and the mean over classes.

    Without ``classes`` every sample belongs to one class, ``"all"``.
    """
    pred_masks, gt_masks = list(pred_masks), list(gt_masks)
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"mdice: {len(pred_masks)} predictions for {len(gt_masks)} masks")
    classes = ["all"] * len(gt_masks) if classes is None else list(classes)
    if len(classes) != len(gt_masks):
        raise ValueError("mdice: one class label per mask required")
    scores: dict = {}
    for p, g, c in zip(pred_masks, gt_masks, classes):
        scores.setdefault(c, []).append(dice(p, g))
    per_class = {c: float(np.mean(v)) for c, v in scores.items()}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def token_precision_recall(pred_tokens, gt_tokens) -> tuple[float, float]:
    """Multiset overlap of lowercased tokens."""
    pred = Counter(str(t).lower() for t in pred_tokens)
    gt = Counter(str(t).lower() for t in gt_tokens)
    n_pred, n_gt = sum(pred.values()), sum(gt.values())
    if n_pred == 0:
        return (1.0, 1.0) if n_gt == 0 else (0.0, 0.0)
    overlap = sum((pred & gt).values())
    recall = overlap / n_gt if n_gt else 0.0
    return overlap / n_pred, recall


def closed_accuracy(preds, gts) -> float:
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"closed_accuracy: {len(preds)} predictions for {len(gts)} answers")
    if not gts:
        raise ValueError("closed_accuracy: no answers")
    return sum(list(p) == list(g) for p, g in zip(preds, gts)) / len(gts)
