"""Toy differentiable recognizer: waveform -> framewise log-posteriors -> words."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (Adam, Tensor, conv1d, getitem, pad_last, load_tensor, log, log_softmax, matmul, no_grad, pick,
                       reduce_mean, relu, save_tensor, transpose)
from .signal import StftConfig, stft_magnitude

log_ = logging.getLogger(__name__)

SIL = "<sil>"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Word list with the silence/blank token fixed at index 0."""

    words: tuple[str, ...]

    def __post_init__(self):
        if self.words.count(SIL) != 0:
            raise ValueError("SIL is reserved; pass only real words")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocab")

    @property
    def tokens(self) -> tuple[str, ...]:
        return (SIL,) + self.words

    def __len__(self) -> int:
        return len(self.words) + 1

    def index(self, word: str) -> int:
        return self.words.index(word) + 1

    def word(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass
class Utterance:
    utt_id: str
    waveform: np.ndarray
    words: tuple[str, ...]
    frame_labels: np.ndarray

    def validate(self, vocab: Vocab) -> None:
        collapsed = collapse(self.frame_labels)
        if tuple(vocab.word(i) for i in collapsed) != tuple(self.words):
            raise ValueError(f"{self.utt_id}: frame labels do not collapse to {self.words}")


@dataclass
class AsrConfig:
    frontend: StftConfig = field(default_factory=StftConfig)
    channels: int = 32
    kernel: int = 5
    layers: int = 3
    smooth_frames: int = 9  # boxcar over posterior frames; 1 disables


def collapse(indices: Sequence[int]) -> list[int]:
    """Merge runs of equal indices and drop silence."""
    out = []
    prev = None
    for i in np.asarray(indices).tolist():
        if i != prev and i != 0:
            out.append(i)
        prev = i
    return out


class AsrModel:
    def __init__(self, vocab: Vocab, config: AsrConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or AsrConfig()
        self.feat_mean = 0.0
        self.feat_std = 1.0
        self.trained = False
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = self.config
        c_in = cfg.frontend.n_bins
        for i in range(cfg.layers):
            std = np.sqrt(2.0 / (c_in * cfg.kernel))
            self.params[f"conv{i}.w"] = Tensor(rng.normal(0, std, (cfg.channels, c_in, cfg.kernel)),
                                               requires_grad=True)
            self.params[f"conv{i}.b"] = Tensor(np.zeros((cfg.channels, 1)), requires_grad=True)
            c_in = cfg.channels
        self.params["proj.w"] = Tensor(rng.normal(0, np.sqrt(1.0 / c_in), (c_in, len(vocab))),
                                       requires_grad=True)
        self.params["proj.b"] = Tensor(np.zeros(len(vocab)), requires_grad=True)

    @property
    def frame_rate(self) -> int:
        return self.config.frontend.frame_shift

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_frames(self, n_samples: int) -> int:
        return self.config.frontend.n_frames(n_samples)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def features(self, x: Tensor) -> Tensor:
        mag = stft_magnitude(x, self.config.frontend)
        return (log(mag) - self.feat_mean) / self.feat_std

    def fit_normalizer(self, waveforms: np.ndarray) -> None:
        with no_grad():
            feats = log(stft_magnitude(Tensor(waveforms), self.config.frontend)).data
        self.feat_mean = float(feats.mean())
        self.feat_std = float(feats.std())

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    # persistence ------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def copy(self) -> "AsrModel":
        clone = AsrModel.__new__(AsrModel)
        clone.vocab, clone.config = self.vocab, self.config
        clone.feat_mean, clone.feat_std, clone.trained = self.feat_mean, self.feat_std, self.trained
        clone.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype)
                        for k, v in self.params.items()}
        return clone

    def astype(self, dtype) -> "AsrModel":
        clone = self.copy()
        for k, v in clone.params.items():
            clone.params[k] = Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype)
        return clone

    def save(self, directory, epoch: int | None = None) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        for k, v in self.params.items():
            save_tensor(path / f"{k}.aten", v.data)
        meta = {
            "kind": "asr",
            "vocab": list(self.vocab.words),
            "config": {**asdict(self.config), "frontend": asdict(self.config.frontend)},
            "feat_mean": self.feat_mean,
            "feat_std": self.feat_std,
            "trained": self.trained,
            "epoch": epoch,
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "AsrModel":
        path = Path(directory)
        meta = json.loads((path / "meta.json").read_text())
        cfg = dict(meta["config"])
        cfg["frontend"] = StftConfig(**cfg["frontend"])
        model = cls(Vocab(tuple(meta["vocab"])), AsrConfig(**cfg))
        model.load_state_dict({k: load_tensor(path / f"{k}.aten") for k in model.params})
        model.feat_mean, model.feat_std = meta["feat_mean"], meta["feat_std"]
        model.trained = meta["trained"]
        return model


def forward(model: AsrModel, x: Tensor) -> Tensor:
    """Log-posteriors ``[..., frames, |vocab|]`` for waveforms ``[..., samples]``."""
    if x.shape[-1] < model.config.frontend.frame_len:
        raise ValueError(f"waveform of {x.shape[-1]} samples is shorter than one frame")
    p = model.params
    h = transpose(model.features(x), _swap_last(x.ndim + 1))
    pad = model.config.kernel // 2
    for i in range(model.config.layers):
        h = relu(conv1d(h, p[f"conv{i}.w"], padding=pad) + p[f"conv{i}.b"])
    if model.config.smooth_frames > 1:
        h = moving_average(h, model.config.smooth_frames)
    h = transpose(h, _swap_last(h.ndim))
    return log_softmax(matmul(h, p["proj.w"]) + p["proj.b"], axis=-1)


def moving_average(h: Tensor, width: int) -> Tensor:
    """Centred boxcar over the last (time) axis with edge reflection."""
    half = width // 2
    n = h.shape[-1]
    padded = pad_last(h, half, width - 1 - half, mode="reflect")
    total = None
    for j in range(width):
        part = getitem(padded, (Ellipsis, slice(j, j + n)))
        total = part if total is None else total + part
    return total / float(width)


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def asr_loss(logp: Tensor, frame_labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Framewise cross-entropy.

    ``reduction="sum_utts"`` sums per-utterance means, which keeps each
    utterance's gradient independent of the batch it sits in.
    """
    labels = np.asarray(frame_labels)
    if labels.shape != logp.shape[:-1]:
        raise ValueError(f"frame count mismatch: labels {labels.shape}, posteriors {logp.shape[:-1]}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logp.shape[-1]:
        raise ValueError("label index out of vocabulary")
    nll = -pick(logp, labels)
    if reduction == "mean":
        return reduce_mean(nll)
    if reduction == "sum_utts":
        return reduce_mean(nll, axis=-1).sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def decode(logp, vocab: Vocab | None = None):
    """Greedy collapse decoding; batched input gives one transcript per row."""
    arr = logp.data if isinstance(logp, Tensor) else np.asarray(logp)
    best = arr.argmax(axis=-1)  # first maximum wins, i.e. lower index on ties
    if best.ndim == 2:
        return [decode_indices(row, vocab) for row in best]
    return decode_indices(best, vocab)


def decode_indices(best: Sequence[int], vocab: Vocab | None = None):
    ids = collapse(best)
    return tuple(vocab.word(i) for i in ids) if vocab is not None else tuple(ids)


def transcribe(model: AsrModel, waveforms: np.ndarray) -> list[tuple[str, ...]]:
    with no_grad():
        logp = forward(model, Tensor(np.atleast_2d(waveforms)))
    return decode(logp, model.vocab)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def stack(utts: Sequence[Utterance], idx) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([utts[i].waveform for i in idx]),
            np.stack([utts[i].frame_labels for i in idx]))


def train(model: AsrModel, utts: Sequence[Utterance], epochs: int = 20, lr: float = 3e-3,
          seed: int = 0, batch_size: int = 32, average_last: int = 5,
          out_dir=None) -> list[float]:
    """Clean cross-entropy training with Adam. Returns the per-epoch mean loss.

    Parameters of the last ``min(average_last, epochs)`` epochs are averaged
    into the final model; ``average_last=0`` keeps the last iterate.
    """
    if not utts:
        raise ValueError("empty training corpus")
    waves = np.stack([u.waveform for u in utts])
    if not model.trained:
        model.fit_normalizer(waves)
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    history: list[float] = []
    snapshots: list[dict[str, np.ndarray]] = []
    for epoch in range(epochs):
        losses = []
        for idx in batches(len(utts), batch_size, rng):
            x, y = stack(utts, idx)
            opt.zero_grad()
            loss = asr_loss(forward(model, Tensor(x)), y)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log_.info("asr epoch %d loss %.4f", epoch, history[-1])
        if average_last and epoch >= epochs - average_last:
            snapshots.append(model.state_dict())
    if snapshots:
        model.load_state_dict({k: np.mean([s[k] for s in snapshots], axis=0) for k in snapshots[0]})
    model.trained = True
    if out_dir is not None:
        model.save(out_dir, epoch=epochs)
    return history
