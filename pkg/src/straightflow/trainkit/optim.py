"""AdamW with decoupled weight decay and the four-phase learning-rate schedule."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Linear warmup, plateau, linear decay to zero, then a fixed floor."""

    peak: float = 1e-3
    floor: float = 1e-4
    warmup: float = 2.0
    plateau: float = 20.0
    decay: float = 18.0

    def __call__(self, epoch):
        if epoch < self.warmup:
            return self.peak * epoch / self.warmup
        e = epoch - self.warmup
        if e < self.plateau:
            return self.peak
        e -= self.plateau
        if e < self.decay:
            return self.peak * (1.0 - e / self.decay)
        return self.floor


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}
