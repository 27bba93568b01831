"""AdamW-style optimizer and global-norm gradient clipping.

Parameter order is the caller's insertion order and never re-sorted, so a
fixed seed gives a bitwise-reproducible trajectory.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        out = {"t": np.asarray([float(self.t)])}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, state: dict):
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i] = state[f"m{i}"].copy()
            self.v[i] = state[f"v{i}"].copy()
