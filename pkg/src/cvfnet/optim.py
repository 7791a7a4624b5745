"""Adam and the two-phase learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class TwoPhaseSchedule:
    """Linear warm-up from ``peak / div_start`` to ``peak``, then cosine decay to ``floor``."""

    total_steps: int
    peak: float = 0.01
    floor: float = 1e-7
    warmup_fraction: float = 0.4
    div_start: float = 10.0

    def __call__(self, step: int) -> float:
        total = max(int(self.total_steps), 1)
        warm = max(int(round(self.warmup_fraction * total)), 1)
        start = self.peak / self.div_start
        if step < warm:
            return start + (self.peak - start) * step / warm
        span = max(total - warm, 1)
        t = min((step - warm) / span, 1.0)
        return self.floor + 0.5 * (self.peak - self.floor) * (1.0 + math.cos(math.pi * t))


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
