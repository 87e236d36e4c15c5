from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn, t: Tensor, eps=1e-5, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``t``.

    ``indices`` restricts the check to some flat positions; the others stay 0.
    """
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size) if indices is None else indices:
            old = flat[i]
            flat[i] = old + eps
            up = float(fn().data)
            flat[i] = old - eps
            down = float(fn().data)
            flat[i] = old
            out[i] = (up - down) / (2 * eps)
    return out.reshape(t.shape)


def relative_error(a, b) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, tensors, eps=1e-5, max_entries=40, rng=None) -> float:
    """Largest relative error between analytic and numeric gradients.

    ``fn`` rebuilds the scalar output from scratch on every call.  At most
    ``max_entries`` random entries per tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        n = t.data.size
        idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        numeric = numeric_grad(fn, t, eps, idx)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]))
    return worst
