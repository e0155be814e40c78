"""Segmentation losses returning (value, gradient) pairs.

All functions take scores shaped (..., K) and targets shaped (...); pixels
equal to ``ignore_index`` contribute nothing to value or gradient.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from ..core import IGNORE_INDEX, softmax

DICE_SMOOTH = 1.0


class UndefinedLossError(ValueError):
    pass


def _prepare(scores, target, ignore_index: int):
    s = np.asarray(scores)
    t = np.asarray(target)
    if s.shape[:-1] != t.shape:
        raise ValueError(f"scores {s.shape} and target {t.shape} disagree")
    valid = t != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise UndefinedLossError("every pixel is the ignore sentinel")
    k = s.shape[-1]
    t_safe = np.where(valid, t, 0).astype(np.intp)
    if t_safe.max() >= k:
        raise ValueError(f"target class {t_safe.max()} outside 0..{k - 1}")
    onehot = (t_safe[..., None] == np.arange(k)) & valid[..., None]
    return s, valid, n, onehot.astype(s.dtype)


def cross_entropy_loss(logits, target, ignore_index: int = IGNORE_INDEX) -> Tuple[float, np.ndarray]:
    """Mean of -log softmax at the target class over non-sentinel pixels."""
    z, valid, n, onehot = _prepare(logits, target, ignore_index)
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    loss = -float((logp * onehot).sum()) / n
    grad = (np.exp(logp) - onehot) * valid[..., None] / n
    return loss, grad.astype(z.dtype)


def dice_loss(probs, target, ignore_index: int = IGNORE_INDEX, smooth: float = DICE_SMOOTH) -> Tuple[float, np.ndarray]:
    """Soft Dice, macro-averaged over classes with target or predicted mass.

    Per class: 1 - (2 * sum(p * g) + smooth) / (sum(p) + sum(g) + smooth).
    """
    p, valid, _, g = _prepare(probs, target, ignore_index)
    k = p.shape[-1]
    vm = valid[..., None].astype(p.dtype)
    pv = (p * vm).reshape(-1, k)
    gv = g.reshape(-1, k)
    inter = (pv * gv).sum(axis=0)
    total = pv.sum(axis=0) + gv.sum(axis=0)
    present = total > 0
    if not present.any():
        return 0.0, np.zeros_like(p)
    per_class = 1.0 - (2.0 * inter + smooth) / (total + smooth)
    m = int(present.sum())
    loss = float(per_class[present].sum()) / m
    den = total + smooth
    # d(per_class_c)/dp_c at a pixel with one-hot target g_c
    coef_g = np.where(present, -2.0 / den, 0.0)
    coef_1 = np.where(present, (2.0 * inter + smooth) / den**2, 0.0)
    grad = (g * coef_g + coef_1) * vm / m
    return loss, grad.astype(p.dtype)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def hybrid_loss(
    logits, target, dice_weight: float = 1.0, ignore_index: int = IGNORE_INDEX
) -> Tuple[float, np.ndarray]:
    """cross_entropy + dice_weight * dice(softmax(logits))."""
    ce, g = cross_entropy_loss(logits, target, ignore_index)
    if dice_weight == 0:
        return ce, g
    z = np.asarray(logits)
    p = softmax(z, axis=-1)
    d, gd = dice_loss(p, target, ignore_index)
    return ce + dice_weight * d, g + dice_weight * softmax_backward(p, gd).astype(z.dtype)
