"""Text and mask losses, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor, make_op

DICE_EPS = 1.0


@dataclass
class LossWeights:
    reg: float = 1.0
    bce: float = 2.0
    dice: float = 0.5

    def __post_init__(self):
        if min(self.reg, self.bce, self.dice) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def cross_entropy_loss(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits`` [N, V].

    Rows flagged in ``ignore_mask`` are excluded from both the sum and the count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ContractError("cross_entropy: target id outside the vocabulary")
    keep = np.ones(targets.shape, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool)
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise ContractError("cross_entropy: every position is ignored")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    tgt = targets[rows]
    n = rows.size
    loss = -logp[np.arange(n), tgt].sum() / n

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), tgt] -= 1.0
        gl = np.zeros_like(logits.data)
        gl[rows] = d * (g / n)
        return (gl,)

    return make_op("cross_entropy", np.asarray(loss), (logits,), backward)


def _check_mask_pair(op, logits, gt):
    gt = np.asarray(gt, dtype=float)
    if gt.shape != logits.shape:
        raise ShapeError(f"{op}: logits {logits.shape} vs mask {gt.shape}")
    return gt


def bce_loss(mask_logits: Tensor, gt_mask) -> Tensor:
    """Mean per-pixel binary cross-entropy with logits (log-sum-exp form)."""
    y = _check_mask_pair("bce_loss", mask_logits, gt_mask)
    x = mask_logits.data
    n = x.size
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def backward(g):
        return ((T._sigmoid(x) - y) * (g / n),)

    return make_op("bce", np.asarray(loss), (mask_logits,), backward)


def dice_loss(mask_logits: Tensor, gt_mask, eps: float = DICE_EPS) -> Tensor:
    """Soft dice loss ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` with ``p = sigmoid``.

    A rank-3 input is a batch of masks: the loss is computed per mask and
    averaged.
    """
    y = _check_mask_pair("dice_loss", mask_logits, gt_mask)
    x = mask_logits.data
    batched = x.ndim >= 3
    xb = x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)
    yb = y.reshape(xb.shape)
    p = T._sigmoid(xb)
    inter = (p * yb).sum(axis=1, keepdims=True)
    total = p.sum(axis=1, keepdims=True) + yb.sum(axis=1, keepdims=True)
    ratio = (2 * inter + eps) / (total + eps)
    loss = float(np.mean(1.0 - ratio))
    nb = xb.shape[0]

    def backward(g):
        dp = -(2 * yb * (total + eps) - (2 * inter + eps)) / (total + eps) ** 2
        return ((dp * p * (1 - p) * (g / nb)).reshape(x.shape),)

    return make_op("dice", np.asarray(loss), (mask_logits,), backward)


def combined_loss(l_reg: Tensor | None, l_bce: Tensor | None, l_dice: Tensor | None,
                  w: LossWeights) -> Tensor:
    """``w.reg * l_reg + w.bce * l_bce + w.dice * l_dice``; ``None`` terms contribute nothing."""
    terms = [T.scale(t, c) for t, c in ((l_reg, w.reg), (l_bce, w.bce), (l_dice, w.dice))
             if t is not None]
    if not terms:
        raise ContractError("combined_loss needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out
