"""First-order optimizers updating tensors in place."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def _require_grad(params: Sequence[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} {p.shape} has no gradient")


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    _require_grad(params)
    for p in params:
        p.data -= (lr * p.grad).astype(p.dtype)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.lr)


class Adam:
    """Adam with bias correction; moment state survives across ``step`` calls."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _require_grad(self.params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)


def adam_step(opt: Adam) -> None:
    opt.step()
