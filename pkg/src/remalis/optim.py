"""Decoupled-weight-decay Adam with linear learning-rate warmup."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor


class AdamW:
    """AdamW over a named parameter dict.

    Weight decay is decoupled (applied directly to the weights, scaled by
    the current learning rate), matching the usual AdamW formulation.
    A ``warmup_steps`` > 0 ramps the learning rate linearly from 0.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, warmup_steps: int = 0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.warmup_steps = int(warmup_steps)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def decay_value(self) -> float:
        """Magnitude of the regularization term: wd/2 * sum ||theta||^2."""
        total = 0.0
        for p in self.params.values():
            total += float(np.sum(p.data * p.data))
        return 0.5 * self.weight_decay * total
