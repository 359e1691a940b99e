"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(iteration: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine anneal from lr_max at iteration 0 to lr_min at ``total``."""
    if total <= 0:
        raise ValueError("total iterations must be > 0")
    frac = min(max(iteration, 0), total) / total
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        """Return updated parameters; moments are kept in float64."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            if lr == 0.0:
                out[name] = p
                continue
            p64 = p.astype(np.float64)
            p64 = p64 - lr * self.weight_decay * p64 - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = p64.astype(p.dtype)
        return out

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}
