"""Adam optimizer and learning-rate schedules."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def adam_update(data: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """One canonical Adam step applied in place (t counts from 1)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(data.dtype, copy=False)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            adam_update(p.data, p.grad, m, v, self.t, self.lr,
                        self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class WarmupConstant:
    """Linear warmup over the first ``warmup`` steps, then constant lr."""

    def __init__(self, base_lr: float, warmup: int = 100):
        self.base_lr = base_lr
        self.warmup = max(int(warmup), 0)

    def __call__(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.base_lr * (step + 1) / self.warmup
        return self.base_lr
