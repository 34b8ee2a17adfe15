"""Adam with a fixed or Noam learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


def noam_rate(step: int, d_model: int, warmup: int, factor: float = 5.0) -> float:
    step = max(step, 1)
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 2e-3,
        betas=(0.9, 0.98),
        eps: float = 1e-9,
        clip: float | None = 5.0,
        schedule: str = "fixed",
        d_model: int = 64,
        warmup: int = 200,
    ):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.schedule = schedule
        self.d_model = d_model
        self.warmup = warmup
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def current_lr(self) -> float:
        if self.schedule == "noam":
            return noam_rate(self.step_count, self.d_model, self.warmup, self.lr)
        return self.lr

    def step(self):
        self.step_count += 1
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(p.grad**2)) for p in self.params))
            scale = min(1.0, self.clip / (norm + 1e-12))
        else:
            scale = 1.0
        lr = self.current_lr()
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for p in self.params:
            g = p.grad * scale
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
