"""Time-domain masking denoiser (encoder / dilated separator / decoder)."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .asr import TrainingDiverged, batches
from .autodiff import (Adam, Tensor, conv1d, conv_transpose1d, getitem, load_tensor, no_grad,
                       pad_last, relu, reshape, save_tensor, sigmoid)
from .signal import MrStftConfig, mrstft_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    enc_dim: int = 32
    enc_kernel: int = 16
    enc_stride: int = 8
    sep_layers: int = 8
    sep_kernel: int = 3
    mask_bias: float = 3.0
    # encoder/decoder start as an exact analysis/synthesis pair; training them
    # freely was found to wreck reconstruction, so by default they stay fixed
    learn_codec: bool = False

    def __post_init__(self):
        if self.enc_kernel % self.enc_stride:
            raise ValueError("enc_kernel must be a multiple of enc_stride")
        if self.enc_dim % 2 or self.enc_dim < 2 * self.enc_kernel:
            raise ValueError("enc_dim must be even and at least twice enc_kernel")
        if self.sep_kernel % 2 == 0:
            raise ValueError("sep_kernel must be odd")


FULL_SHAPE = DenoiserConfig(enc_dim=128, enc_kernel=16, enc_stride=8, sep_layers=16)


class DenoiserModel:
    """Encoder filters start as a +/- pair bank with the decoder as its inverse,
    so an untrained model is close to the identity map."""

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0):
        self.config = cfg = config or DenoiserConfig()
        self.trained = False
        rng = np.random.default_rng(seed)
        k, n = cfg.enc_kernel, cfg.enc_dim
        q, _ = np.linalg.qr(rng.normal(size=(k, k)))
        half = n // 2
        basis = np.concatenate([q, rng.normal(0, 1 / np.sqrt(k), (half - k, k))]) if half > k else q
        enc = np.concatenate([basis, -basis])  # [n, k]
        # overlap factor k/stride frames cover each sample
        gain = 1.0 / (k // cfg.enc_stride) / (1.0 / (1.0 + np.exp(-cfg.mask_bias)))
        inv = np.linalg.pinv(basis)  # [k, half]
        dec = gain * np.concatenate([inv, -inv], axis=1).T  # [n, k]
        self.params: dict[str, Tensor] = {
            "enc.w": Tensor(enc[:, None, :], requires_grad=True),
            "dec.w": Tensor(dec[:, None, :], requires_grad=True),
        }
        for i in range(cfg.sep_layers):
            std = 0.1 * np.sqrt(2.0 / (n * cfg.sep_kernel))
            self.params[f"sep{i}.w"] = Tensor(rng.normal(0, std, (n, n, cfg.sep_kernel)), requires_grad=True)
            self.params[f"sep{i}.b"] = Tensor(np.zeros((n, 1)), requires_grad=True)
        self.params["mask.w"] = Tensor(rng.normal(0, 0.01, (n, n, 1)), requires_grad=True)
        self.params["mask.b"] = Tensor(np.full((n, 1), cfg.mask_bias), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Tensor]:
        if self.config.learn_codec:
            return self.parameters()
        return [v for k, v in self.params.items() if k not in ("enc.w", "dec.w")]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def __call__(self, x: Tensor) -> Tensor:
        return denoise(self, x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def copy(self) -> "DenoiserModel":
        clone = DenoiserModel.__new__(DenoiserModel)
        clone.config = self.config
        clone.trained = self.trained
        clone.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype)
                        for k, v in self.params.items()}
        return clone

    def astype(self, dtype) -> "DenoiserModel":
        clone = self.copy()
        for k, v in clone.params.items():
            clone.params[k] = Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype)
        return clone

    def save(self, directory, epoch: int | None = None) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        for k, v in self.params.items():
            save_tensor(path / f"{k}.aten", v.data)
        meta = {"kind": "denoiser", "config": asdict(self.config), "epoch": epoch, "trained": self.trained}
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "DenoiserModel":
        path = Path(directory)
        meta = json.loads((path / "meta.json").read_text())
        model = cls(DenoiserConfig(**meta["config"]))
        model.load_state_dict({k: load_tensor(path / f"{k}.aten") for k in model.params})
        model.trained = meta.get("trained", True)
        return model


def denoise(model: DenoiserModel, x: Tensor) -> Tensor:
    """Map waveforms ``[..., T]`` to waveforms of the same length."""
    cfg = model.config
    n = x.shape[-1]
    k, s = cfg.enc_kernel, cfg.enc_stride
    if n < k:
        raise ValueError(f"waveform of {n} samples is shorter than the encoder kernel ({k})")
    # reflect-pad by kernel - stride each side so every kept sample sees the full frame
    # overlap, then up to a whole number of hops
    left = k - s
    total = n + 2 * left
    total += (-(total - k)) % s
    right = total - n - left
    unbatched = x.ndim == 1
    h = pad_last(x, left, right, mode="reflect")
    h = reshape(h, (1 if unbatched else x.shape[0], 1, total))
    p = model.params
    enc = relu(conv1d(h, p["enc.w"], stride=s))
    z = enc
    for i in range(cfg.sep_layers):
        d = 2 ** i
        pad = d * (cfg.sep_kernel - 1) // 2
        z = z + relu(conv1d(z, p[f"sep{i}.w"], dilation=d, padding=pad) + p[f"sep{i}.b"])
    mask = sigmoid(conv1d(z, p["mask.w"]) + p["mask.b"])
    out = conv_transpose1d(enc * mask, p["dec.w"], stride=s)
    out = getitem(out, (slice(None), 0, slice(left, left + n)))
    return reshape(out, (n,)) if unbatched else out


def train_offline(model: DenoiserModel, benign: np.ndarray, attacked: np.ndarray, epochs: int = 20,
                  lr: float = 1e-3, seed: int = 0, batch_size: int = 32,
                  mr_cfg: MrStftConfig | None = None, out_dir=None) -> list[float]:
    """Regress benign waveforms from attacked ones under the MRSTFT loss.

    Returns the full-dataset loss after each epoch, with the untrained
    model's loss as entry 0. The returned model holds the best of those states.
    """
    if len(benign) == 0:
        raise ValueError("empty attack dataset")
    if benign.shape != attacked.shape:
        raise ValueError("benign/attacked arrays differ in shape")
    rng = np.random.default_rng(seed)
    params = model.trainable_parameters()
    opt = Adam(params, lr=lr)
    history = [dataset_loss(model, benign, attacked, mr_cfg)]
    best = (history[0], model.state_dict())
    for epoch in range(epochs):
        for idx in batches(len(benign), batch_size, rng):
            opt.zero_grad()
            loss = mrstft_loss(benign[idx], denoise(model, Tensor(attacked[idx])), mr_cfg)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"denoiser loss became non-finite at epoch {epoch}")
            loss.backward(only=params)
            opt.step()
        history.append(dataset_loss(model, benign, attacked, mr_cfg))
        log.info("denoiser epoch %d loss %.4f", epoch, history[-1])
        if history[-1] < best[0]:
            best = (history[-1], model.state_dict())
    # keep the best full-dataset loss seen, the untrained state included
    model.load_state_dict(best[1])
    model.trained = True
    if out_dir is not None:
        model.save(out_dir, epoch=epochs)
    return history


def dataset_loss(model: DenoiserModel, benign: np.ndarray, attacked: np.ndarray,
                 mr_cfg: MrStftConfig | None = None, batch_size: int = 64) -> float:
    total = 0.0
    with no_grad():
        for idx in batches(len(benign), batch_size):
            total += mrstft_loss(benign[idx], denoise(model, Tensor(attacked[idx])), mr_cfg).item() * len(idx)
    return total / len(benign)
