"""Slow, independent reimplementations of the metrics, used as test oracles."""

import numpy as np


def dice_loop(pred, gt) -> float:
    inter = size_p = size_g = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        size_p += bool(p)
        size_g += bool(g)
        inter += bool(p) and bool(g)
    if size_p + size_g == 0:
        return 1.0
    return 2.0 * inter / (size_p + size_g)


def mdice_loop(preds, gts, classes):
    by_class = {}
    for p, g, c in zip(preds, gts, classes):
        by_class.setdefault(c, []).append(dice_loop(p, g))
    per = {c: sum(v) / len(v) for c, v in by_class.items()}
    return per, sum(per.values()) / len(per)


def precision_recall_recount(pred, gt):
    pool = [t.lower() for t in gt]
    overlap = 0
    for t in pred:
        if t.lower() in pool:
            pool.remove(t.lower())
            overlap += 1
    if not pred:
        return (1.0, 1.0) if not gt else (0.0, 0.0)
    return overlap / len(pred), (overlap / len(gt) if gt else 0.0)


def random_masks(rng, shape=(12, 12)):
    kind = rng.integers(4)
    if kind == 0:
        return np.zeros(shape, bool), rng.random(shape) < rng.uniform(0, 1)
    if kind == 1:
        return np.zeros(shape, bool), np.zeros(shape, bool)
    p = rng.uniform(0, 1)
    return rng.random(shape) < p, rng.random(shape) < rng.uniform(0, 1)


def random_tokens(rng, words=("disk", "Disk", "ring", "a", "it", "is", ",", "square")):
    return [str(w) for w in rng.choice(words, size=int(rng.integers(0, 7)))]
