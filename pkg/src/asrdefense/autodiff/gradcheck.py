"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs deviation scaled by the largest gradient magnitude (floored)."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Worst relative error over ``inputs`` between backprop and central differences.

    Run in float64; float32 round-off swamps a step of 1e-3.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_grad(fn, t, h)))
    return worst
