"""RMSprop."""

from __future__ import annotations

import numpy as np


class RMSprop:
    """``v = rho * v + (1 - rho) * g**2``; ``p -= lr * g / (sqrt(v) + eps)``."""

    def __init__(self, lr=0.003, rho=0.9, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place; keys of both dicts must match."""
        for key, p in params.items():
            g = grads[key]
            v = self.state.get(key)
            if v is None:
                v = self.state[key] = np.zeros_like(p)
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p -= (self.lr * g / (np.sqrt(v) + self.eps)).astype(p.dtype)
