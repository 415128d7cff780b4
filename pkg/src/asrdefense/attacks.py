"""White-box FGSM and PGD attacks against a recognizer chain."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .asr import AsrModel, asr_loss, forward
from .autodiff import NonFiniteError, Tensor, no_grad
from .corpus import utt_rng
from .denoiser import DenoiserModel


class AttackFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    norm: str = "Linf"
    epsilon: float = 0.01
    iterations: int = 7
    step: float | None = None  # defaults to epsilon / 5
    mode: str = "targeted"
    clamp_audio: bool = True

    def __post_init__(self):
        if self.norm not in ("Linf", "L2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")

    @property
    def alpha(self) -> float:
        return self.epsilon / 5 if self.step is None else self.step

    @classmethod
    def fgsm(cls, epsilon: float, **kw) -> "AttackSpec":
        return cls(norm="Linf", epsilon=epsilon, iterations=1, step=epsilon, **kw)

    @property
    def label(self) -> str:
        if self.iterations == 1 and self.norm == "Linf" and self.alpha == self.epsilon:
            return "FGSM"
        return f"PGD-{self.iterations}"


@dataclass
class ModelChain:
    """denoiser -> smoothing noise -> recognizer.

    ``adaptive`` says whether the attacker back-propagates through the
    denoiser; the noise stage is always part of the attacker's view.
    """

    recognizer: AsrModel
    denoiser: DenoiserModel | None = None
    sigma: float = 0.0
    adaptive: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def stochastic(self) -> bool:
        return self.sigma > 0

    def __call__(self, x: Tensor, noise: np.ndarray | None = None) -> Tensor:
        h = x
        if self.denoiser is not None:
            h = self.denoiser(h)
        if self.sigma > 0 and noise is not None:
            h = h + Tensor(self.sigma * noise, dtype=h.dtype)
        return forward(self.recognizer, h)

    def attacker_view(self) -> "ModelChain":
        if self.adaptive or self.denoiser is None:
            return self
        return replace(self, denoiser=None)

    def parameters(self):
        params = self.recognizer.parameters()
        if self.denoiser is not None:
            params = params + self.denoiser.parameters()
        return params


class NoiseSource:
    """Per-utterance Gaussian streams; each call draws fresh noise for every row."""

    def __init__(self, seed: int, utt_ids: Sequence[str], n_samples: int, purpose: str):
        self.rngs = [utt_rng(seed, uid, purpose) for uid in utt_ids]
        self.n_samples = n_samples

    def draw(self, unbatched: bool) -> np.ndarray:
        noise = np.stack([r.standard_normal(self.n_samples) for r in self.rngs])
        return noise[0] if unbatched else noise


def project_l2(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale each row (last axis) back onto the L2 ball of radius ``epsilon``."""
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.minimum(1.0, epsilon / np.maximum(norms, 1e-30))
    return delta * scale


def input_gradient(chain: ModelChain, x: np.ndarray, labels: np.ndarray,
                   noise: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Gradient of the framewise loss with respect to the input waveform(s)."""
    xt = Tensor(x, requires_grad=True)
    loss = asr_loss(chain(xt, noise), labels, reduction="sum_utts")
    loss.backward(only=[xt])
    grad = xt.grad
    if grad is None:
        grad = np.zeros_like(xt.data)
    if not np.isfinite(grad).all():
        raise AttackFailed("non-finite input gradient")
    return grad.astype(np.float64), loss.item()


def _ids(utt_ids, n):
    return list(utt_ids) if utt_ids is not None else [str(i) for i in range(n)]


def pgd(chain: ModelChain, x: np.ndarray, labels: np.ndarray, spec: AttackSpec, seed: int = 0,
        utt_ids: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Projected signed-gradient attack, gradient taken at the current iterate.

    ``labels`` are target frame labels for a targeted attack (loss descent)
    or ground-truth frame labels for an untargeted one (loss ascent).
    Returns ``(x_adv, delta)`` where ``delta`` is float64 and honours the
    budget exactly.
    """
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels)
    unbatched = x.ndim == 1
    xb = x[None] if unbatched else x
    lb = labels[None] if unbatched else labels
    view = chain.attacker_view()
    noise = NoiseSource(seed, _ids(utt_ids, xb.shape[0]), xb.shape[-1], "pgd-noise") \
        if view.stochastic else None
    direction = -1.0 if spec.mode == "targeted" else 1.0
    x64 = xb.astype(np.float64)
    delta = np.zeros_like(x64)
    eps, alpha = spec.epsilon, spec.alpha
    for _ in range(spec.iterations):
        x_cur = (x64 + delta).astype(np.float32)
        try:
            grad, _ = input_gradient(view, x_cur, lb, noise.draw(False) if noise else None)
        except NonFiniteError as exc:
            raise AttackFailed(str(exc)) from exc
        if spec.norm == "Linf":
            delta = np.clip(delta + direction * alpha * np.sign(grad), -eps, eps)
        else:
            gnorm = np.linalg.norm(grad, axis=-1, keepdims=True)
            unit = np.divide(grad, gnorm, out=np.zeros_like(grad), where=gnorm > 0)
            delta = project_l2(delta + direction * alpha * unit, eps)
        if spec.clamp_audio:
            delta = np.clip(x64 + delta, -1.0, 1.0) - x64
            delta = np.clip(delta, -eps, eps) if spec.norm == "Linf" else project_l2(delta, eps)
    x_adv = x64 + delta
    if spec.clamp_audio:
        x_adv = np.clip(x_adv, -1.0, 1.0)
    x_adv = x_adv.astype(np.float32)
    if unbatched:
        return x_adv[0], delta[0]
    return x_adv, delta


def fgsm(chain: ModelChain, x: np.ndarray, labels: np.ndarray, epsilon: float, seed: int = 0,
         utt_ids: Sequence[str] | None = None, mode: str = "targeted") -> tuple[np.ndarray, np.ndarray]:
    return pgd(chain, x, labels, AttackSpec.fgsm(epsilon, mode=mode), seed, utt_ids)


def chain_loss(chain: ModelChain, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-utterance framewise loss without noise."""
    with no_grad():
        logp = chain(Tensor(np.atleast_2d(x)))
    nll = -np.take_along_axis(logp.data, np.atleast_2d(labels)[..., None], axis=-1)[..., 0]
    return nll.mean(axis=-1)
