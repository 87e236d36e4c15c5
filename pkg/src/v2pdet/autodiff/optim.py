from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def adamw_step(params, grads, state, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8) -> bool:
    """One AdamW update, in place.

    ``params`` and ``grads`` map names to arrays; ``state`` is a dict that is
    filled on first use.  Returns False (and leaves everything untouched)
    when any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; skipping step", name)
            return False
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        p *= 1 - lr * wd
        m[name] = beta1 * m[name] + (1 - beta1) * g
        v[name] = beta2 * v[name] + (1 - beta2) * g * g
        p -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return True


class AdamW:
    def __init__(self, named_params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8,
                 grad_clip=None):
        self.params = dict(named_params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.grad_clip = grad_clip
        self.state = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()
                                 if p.grad is not None)))

    def step(self) -> bool:
        grads = {k: p.grad for k, p in self.params.items()}
        if self.grad_clip:
            norm = self.grad_norm()
            if np.isfinite(norm) and norm > self.grad_clip:
                grads = {k: None if g is None else g * (self.grad_clip / norm) for k, g in grads.items()}
        return adamw_step({k: p.data for k, p in self.params.items()}, grads, self.state,
                          self.lr, self.wd, self.betas[0], self.betas[1], self.eps)
