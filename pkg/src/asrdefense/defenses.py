"""Randomized smoothing and the adversarial fine-tuning defenses."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .asr import AsrModel, TrainingDiverged, Utterance, asr_loss, batches, stack
from .attacks import AttackSpec, ModelChain, pgd
from .autodiff import Adam, Tensor
from .denoiser import DenoiserModel

log = logging.getLogger(__name__)

VARIANTS = ("asr_only", "joint", "joint_frozen")


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.001
    seed_policy: str = "fixed_per_utterance"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.seed_policy not in ("fresh_per_call", "fixed_per_utterance"):
            raise ValueError(f"unknown seed policy {self.seed_policy!r}")


def smooth(x: np.ndarray, cfg: SmoothingConfig, seed: int = 0) -> np.ndarray:
    """Add N(0, sigma^2) noise from a seeded stream; sigma = 0 returns ``x`` unchanged."""
    x = np.asarray(x)
    if cfg.sigma == 0:
        return x
    noise = np.random.default_rng(seed).standard_normal(x.shape)
    return (x + cfg.sigma * noise).astype(x.dtype)


@dataclass(frozen=True)
class FinetuneConfig:
    variant: str = "asr_only"
    iterations: int = 7
    eps_low: float = 1e-4
    eps_high: float = 0.02
    base_lr: float = 3e-3
    lr_scale: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.eps_low <= self.eps_high:
            raise ValueError("need 0 <= eps_low <= eps_high")

    @property
    def lr(self) -> float:
        return self.base_lr * self.lr_scale


def sample_epsilon(rng: np.random.Generator, low: float, high: float) -> float:
    """Log-uniform draw on [low, high]; a zero lower bound gives exactly zero."""
    if low == 0:
        return 0.0
    return float(np.exp(rng.uniform(np.log(low), np.log(high))))


class Identity:
    """Stand-in denoiser that passes the waveform through and has no parameters."""

    trained = True

    def __call__(self, x: Tensor) -> Tensor:
        return x

    def parameters(self) -> list[Tensor]:
        return []

    def trainable_parameters(self) -> list[Tensor]:
        return []


def adversarial_finetune(recognizer: AsrModel, denoiser, utts: Sequence[Utterance],
                         cfg: FinetuneConfig, update: Sequence[Tensor]) -> list[float]:
    """Min-max loop shared by every variant.

    Per minibatch: draw a budget, find an untargeted PGD perturbation that
    raises the framewise loss through the current chain, then take one
    optimizer step on that same loss at the perturbed input. Only tensors in
    ``update`` move. Returns per-epoch mean outer loss.
    """
    if not recognizer.trained:
        raise ValueError("adversarial fine-tuning must start from a pre-trained recognizer")
    if denoiser is not None and not getattr(denoiser, "trained", False):
        raise ValueError("adversarial fine-tuning must start from a pre-trained denoiser")
    chain = ModelChain(recognizer, denoiser)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(list(update), lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in batches(len(utts), cfg.batch_size, rng):
            x, y = stack(utts, idx)
            eps = sample_epsilon(rng, cfg.eps_low, cfg.eps_high)
            if eps > 0:
                spec = AttackSpec(norm="Linf", epsilon=eps, iterations=cfg.iterations, mode="untargeted")
                x_adv, _ = pgd(chain, x, y, spec, seed=cfg.seed + step,
                               utt_ids=[utts[i].utt_id for i in idx])
            else:
                x_adv = x
            opt.zero_grad()
            loss = asr_loss(chain(Tensor(x_adv)), y)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"fine-tuning loss became non-finite at epoch {epoch}")
            loss.backward(only=opt.params)
            opt.step()
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d adv loss %.4f", cfg.variant, epoch, history[-1])
    return history


def adv_finetune_asr(model: AsrModel, utts: Sequence[Utterance], cfg: FinetuneConfig) -> list[float]:
    """Fine-tune the recognizer on on-the-fly PGD examples (in place)."""
    return adversarial_finetune(model, None, utts, cfg, model.parameters())


def adv_finetune_joint(denoiser, model: AsrModel, utts: Sequence[Utterance], cfg: FinetuneConfig,
                       freeze_denoiser: bool = False) -> list[float]:
    """Fine-tune denoiser and recognizer together, attacks taken through both (in place)."""
    params = model.parameters() + ([] if freeze_denoiser else denoiser.trainable_parameters())
    return adversarial_finetune(model, denoiser, utts, cfg, params)


def adv_finetune_joint_frozen(denoiser, model: AsrModel, utts: Sequence[Utterance],
                              cfg: FinetuneConfig) -> list[float]:
    """Attacks through denoiser and recognizer; only the denoiser is updated."""
    return adversarial_finetune(model, denoiser, utts, cfg, denoiser.trainable_parameters())


def finetune(variant: str, model: AsrModel, denoiser: DenoiserModel | None,
             utts: Sequence[Utterance], cfg: FinetuneConfig) -> list[float]:
    if variant == "asr_only":
        return adv_finetune_asr(model, utts, cfg)
    if denoiser is None:
        raise ValueError(f"variant {variant!r} needs a denoiser")
    if variant == "joint":
        return adv_finetune_joint(denoiser, model, utts, cfg)
    if variant == "joint_frozen":
        return adv_finetune_joint_frozen(denoiser, model, utts, cfg)
    raise ValueError(f"unknown variant {variant!r}")
