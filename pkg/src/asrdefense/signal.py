"""Differentiable STFT and multi-resolution STFT losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, abs_, frame, log, magnitude, matmul, reduce_mean, reduce_sum, sqrt


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 64
    frame_shift: int = 16
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.frame_shift <= self.frame_len:
            raise ValueError(f"need 0 < frame_shift <= frame_len, got {self.frame_shift}/{self.frame_len}")
        if self.frame_len % 2:
            raise ValueError(f"frame_len must be even, got {self.frame_len}")
        if self.window not in ("hann", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + (length - self.frame_len) // self.frame_shift


@dataclass(frozen=True)
class MrStftConfig:
    resolutions: tuple[StftConfig, ...] = field(default_factory=lambda: (
        StftConfig(64, 16), StftConfig(128, 32), StftConfig(32, 8)))

    def __post_init__(self):
        if not self.resolutions:
            raise ValueError("need at least one resolution")
        if len(set(self.resolutions)) != len(self.resolutions):
            raise ValueError("resolutions must be distinct")

    @property
    def max_frame_len(self) -> int:
        return max(r.frame_len for r in self.resolutions)


@lru_cache(maxsize=None)
def _dft_basis(frame_len: int, window: str, dtype: str):
    n = np.arange(frame_len)
    k = np.arange(frame_len // 2 + 1)
    if window == "hann":
        # periodic Hann
        win = 0.5 - 0.5 * np.cos(2 * np.pi * n / frame_len)
    else:
        win = np.ones(frame_len)
    angle = 2 * np.pi * np.outer(n, k) / frame_len
    cos = (win[:, None] * np.cos(angle)).astype(dtype)
    sin = (-win[:, None] * np.sin(angle)).astype(dtype)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def stft(x: Tensor, cfg: StftConfig) -> tuple[Tensor, Tensor]:
    """Real and imaginary parts, each ``[..., frames, bins]``.

    The window is folded into the DFT matrices, so each frame costs one matmul.
    """
    if x.shape[-1] < cfg.frame_len:
        raise ValueError(f"signal of length {x.shape[-1]} shorter than frame_len {cfg.frame_len}")
    cos, sin = _dft_basis(cfg.frame_len, cfg.window, x.dtype.str)
    frames = frame(x, cfg.frame_len, cfg.frame_shift)
    return (matmul(frames, Tensor(cos, dtype=x.dtype)),
            matmul(frames, Tensor(sin, dtype=x.dtype)))


def stft_magnitude(x: Tensor, cfg: StftConfig) -> Tensor:
    return magnitude(*stft(x, cfg))


def _frobenius(t: Tensor) -> Tensor:
    return sqrt(reduce_sum(t * t, axis=(-2, -1)))


def _check_pair(x: Tensor, x_hat: Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")


def spectral_convergence(x: Tensor, x_hat: Tensor, cfg: StftConfig) -> Tensor:
    """Frobenius norm of the magnitude difference over that of the reference.

    Batched inputs ``[B, T]`` give the mean over the batch.
    """
    _check_pair(x, x_hat)
    ref = stft_magnitude(x, cfg)
    denom = _frobenius(ref)
    if (denom.data <= 0).any():
        raise ValueError("spectral convergence undefined for an all-zero reference")
    ratio = _frobenius(ref - stft_magnitude(x_hat, cfg)) / denom
    return reduce_mean(ratio)


def log_magnitude_loss(x: Tensor, x_hat: Tensor, cfg: StftConfig) -> Tensor:
    """Mean absolute log-magnitude difference over all time-frequency bins."""
    _check_pair(x, x_hat)
    diff = log(stft_magnitude(x, cfg)) - log(stft_magnitude(x_hat, cfg))
    return reduce_mean(reduce_mean(abs_(diff), axis=(-2, -1)))


def mrstft_loss(x, x_hat: Tensor, cfg: MrStftConfig | None = None) -> Tensor:
    """Sum over resolutions of spectral convergence plus log-magnitude loss.

    ``x`` is the fixed benign reference and never receives gradient.
    """
    cfg = cfg or MrStftConfig()
    ref = Tensor(x.data if isinstance(x, Tensor) else x, dtype=x_hat.dtype)
    if x_hat.shape[-1] < cfg.max_frame_len:
        raise ValueError(f"signals shorter than the largest frame ({cfg.max_frame_len})")
    total = None
    for res in cfg.resolutions:
        term = spectral_convergence(ref, x_hat, res) + log_magnitude_loss(ref, x_hat, res)
        total = term if total is None else total + term
    return total
