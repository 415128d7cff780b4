"""Experiment configuration: nested dataclasses loaded from a strict YAML file."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .corpus import L2_BUDGETS, LINF_BUDGETS, OFFLINE_ITERATIONS, CorpusConfig
from .defenses import VARIANTS, SmoothingConfig

SYSTEMS = ("Baseline", "RS0.001", "DENOISER", "ADV-FINETUNE-ASR", "ADV-FINETUNE-JOINT",
           "ADV-FINETUNE-JOINT-ASRfrozen")
VARIANT_SYSTEM = {"asr_only": "ADV-FINETUNE-ASR", "joint": "ADV-FINETUNE-JOINT",
                  "joint_frozen": "ADV-FINETUNE-JOINT-ASRfrozen"}


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types or values that fail validation."""


@dataclass
class AsrSection:
    frame_len: int = 64
    frame_shift: int = 16
    window: str = "hann"
    channels: int = 32
    kernel: int = 5
    layers: int = 3
    smooth_frames: int = 9
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 32
    average_last: int = 5


@dataclass
class DenoiserSection:
    preset: str = "desk"  # or "full" (128-dim encoder, 16 separator layers)
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class OfflineAttackSection:
    l2_budgets: tuple[float, ...] = L2_BUDGETS
    linf_budgets: tuple[float, ...] = LINF_BUDGETS
    iterations: tuple[int, ...] = OFFLINE_ITERATIONS


@dataclass
class FinetuneSection:
    variants: tuple[str, ...] = VARIANTS
    iterations: int = 7
    eps_low: float = 1e-4
    eps_high: float = 0.02
    base_lr: float = 3e-3
    lr_scale: float = 0.1
    epochs: int = 5
    batch_size: int = 32


@dataclass
class EvaluationSection:
    systems: tuple[str, ...] = SYSTEMS
    norm: str = "Linf"
    epsilons: tuple[float, ...] = (0.0001, 0.001, 0.01, 0.1, 0.2)
    iterations: tuple[int, ...] = (1, 7, 100)
    mode: str = "targeted"
    boxplot_exclude: tuple[float, ...] = (0.2,)
    chunk_size: int = 50


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    asr: AsrSection = field(default_factory=AsrSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    attacks: OfflineAttackSection = field(default_factory=OfflineAttackSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self) -> "ExperimentConfig":
        ev = self.evaluation
        if not ev.epsilons or any(e <= 0 for e in ev.epsilons):
            raise ConfigError("evaluation.epsilons must be a non-empty list of positive budgets")
        if not ev.iterations or any(i < 1 for i in ev.iterations):
            raise ConfigError("evaluation.iterations must be a non-empty list of positive counts")
        if ev.norm not in ("Linf", "L2"):
            raise ConfigError(f"evaluation.norm must be Linf or L2, got {ev.norm!r}")
        if ev.mode not in ("targeted", "untargeted"):
            raise ConfigError(f"evaluation.mode must be targeted or untargeted, got {ev.mode!r}")
        if unknown := set(ev.systems) - set(SYSTEMS):
            raise ConfigError(f"unknown systems {sorted(unknown)}; choose from {list(SYSTEMS)}")
        if unknown := set(self.finetune.variants) - set(VARIANTS):
            raise ConfigError(f"unknown fine-tune variants {sorted(unknown)}")
        if self.denoiser.preset not in ("desk", "full"):
            raise ConfigError(f"denoiser.preset must be desk or full, got {self.denoiser.preset!r}")
        att = self.attacks
        if not (att.l2_budgets and att.linf_budgets and att.iterations):
            raise ConfigError("offline attack grids must be non-empty")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        needed = {VARIANT_SYSTEM[v] for v in VARIANTS} & set(ev.systems)
        if missing := needed - {VARIANT_SYSTEM[v] for v in self.finetune.variants}:
            raise ConfigError(f"systems {sorted(missing)} need their fine-tune variant enabled")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (inner, _) = typing.get_args(tp)
        return tuple(_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (str, bool) and isinstance(value, tp):
        return value
    raise ConfigError(f"{where}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    if unknown := set(data) - names:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where or 'top level'}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(data)
