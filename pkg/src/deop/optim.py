"""Plain gradient descent and Adam over a name -> Tensor parameter dict.

Both update ``Tensor.data`` in place. A per-parameter boolean ``masks`` entry
restricts the update to its True entries; masked-out entries are never written.
``scales`` multiplies the learning rate of individual parameters.
"""

from __future__ import annotations

import numpy as np

from .numcore import NonFiniteError, Tensor


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, masks: dict | None = None,
                 scales: dict | None = None):
        self.params, self.lr = params, lr
        self.masks = masks or {}
        self.scales = scales or {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            t = self.params[name]
            upd = self.lr * self.scales.get(name, 1.0) * g
            m = self.masks.get(name)
            if m is not None:
                upd = np.where(m, upd, 0.0)
            new = t.data - upd
            if not np.isfinite(new).all():
                raise NonFiniteError(f"non-finite update for {name}")
            if m is not None:
                t.data[m] = new[m]
            else:
                t.data[...] = new


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 masks: dict | None = None, scales: dict | None = None):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.masks = masks or {}
        self.scales = scales or {}
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr if lr is None else lr
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = lr * self.scales.get(name, 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t = self.params[name]
            mask = self.masks.get(name)
            new = t.data - upd
            if not np.isfinite(new).all():
                raise NonFiniteError(f"non-finite update for {name}")
            if mask is not None:
                t.data[mask] = new[mask]
            else:
                t.data[...] = new


def make_optimizer(kind: str, params: dict, lr: float, masks: dict | None = None,
                   scales: dict | None = None):
    if kind == "sgd":
        return SGD(params, lr, masks, scales)
    if kind == "adam":
        return Adam(params, lr, masks=masks, scales=scales)
    raise ValueError(f"unknown optimizer {kind!r} (expected sgd or adam)")
