"""Loss functions with hand-derived gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, _send

PROB_EPS = 1e-7


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def _clamp(p):
    clipped = np.clip(p.data, PROB_EPS, 1 - PROB_EPS)
    passthrough = (p.data >= PROB_EPS) & (p.data <= 1 - PROB_EPS)
    return clipped, passthrough


def focal_loss(p: Tensor, y, alpha=0.25, gamma=2.0, normalizer=None) -> Tensor:
    """Binary focal loss ``-a_t (1 - p_t)^gamma log(p_t)``.

    Summed over elements and divided by ``normalizer`` (element count when
    omitted).
    """
    y = _check_labels(y).reshape(p.shape)
    pc, through = _clamp(p)
    pt = np.where(y == 1, pc, 1 - pc)
    at = np.where(y == 1, alpha, 1 - alpha)
    n = float(p.data.size if normalizer is None else normalizer)
    n = max(n, 1.0)
    q = 1 - pt
    loss = -(at * q ** gamma * np.log(pt)).sum() / n

    def backward(g):
        dpt = at * (gamma * q ** (gamma - 1) * np.log(pt) - q ** gamma / pt) if gamma else -at / pt
        dp = np.where(y == 1, dpt, -dpt) * through
        _send(p, g * dp / n)
    return _make(loss, (p,), backward, "focal_loss")


def bce_loss(p: Tensor, y, normalizer=None) -> Tensor:
    y = _check_labels(y).reshape(p.shape)
    pc, through = _clamp(p)
    n = max(float(p.data.size if normalizer is None else normalizer), 1.0)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n

    def backward(g):
        dp = (-(y / pc) + (1 - y) / (1 - pc)) * through
        _send(p, g * dp / n)
    return _make(loss, (p,), backward, "bce_loss")


def smooth_l1(pred: Tensor, target, beta=1.0) -> Tensor:
    """Elementwise smooth-L1 of ``pred - target``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"smooth_l1 shape mismatch: pred {pred.shape} vs target {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        _send(pred, g * np.where(small, d / beta, np.sign(d)))
    return _make(out, (pred,), backward, "smooth_l1")
