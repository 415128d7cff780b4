"""Reverse-mode automatic differentiation over numpy arrays.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure pushing the upstream gradient back to them. The graph is rebuilt on
every forward pass; :func:`build_tape` orders it for the backward sweep.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8
DEFAULT_DTYPE = np.float32

# graph recording is a per-thread switch: tapes never cross workers
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = _check_finite(arr, "Tensor()")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # construction -----------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(np.asarray(data), op)
        out.grad = None
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self._wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method shorthands
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad: np.ndarray | None = None, only=None) -> None:
        backward(self, grad, only)


# ----------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Operations reachable from a root, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def build_tape(root: Tensor) -> Tape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(loss: Tensor, grad: np.ndarray | None = None, only: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every tensor requiring gradients reachable from ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`. With
    ``only``, leaves outside that set are left untouched, so shared model
    parameters stay read-only while e.g. an input gradient is taken.
    """
    keep = None if only is None else {id(t) for t in only}
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    # interior gradients live here; leaves receive theirs in .grad
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if keep is None or id(node) in keep:
                node._accum(g)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ----------------------------------------------------------------------
# elementwise


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._result(a.data + b.data, (a, b), "add",
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._result(a.data - b.data, (a, b), "sub",
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._result(a.data * b.data, (a, b), "mul",
                          lambda g: (_unbroadcast(g * b.data, a.shape),
                                     _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._result(out, (a, b), "div", bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return Tensor._result(out, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def abs_(a: Tensor) -> Tensor:
    return Tensor._result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def log(a: Tensor) -> Tensor:
    """Natural log of ``a + EPS``; inputs must satisfy ``a + EPS > 0``."""
    shifted = a.data + EPS
    if (shifted <= 0).any():
        raise ValueError("log of non-positive input")
    return Tensor._result(np.log(shifted), (a,), "log", lambda g: (g / shifted,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), "exp", lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), "sqrt",
                          lambda g: (g * 0.5 / np.maximum(out, EPS),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sign(a: Tensor) -> Tensor:
    """Sign with sign(0) = 0. Not differentiable: gradient is zero."""
    return Tensor._result(np.sign(a.data), (a,), "sign", lambda g: (None,))


def magnitude(re: Tensor, im: Tensor) -> Tensor:
    """sqrt(re**2 + im**2) with a zero gradient at the origin."""
    out = np.sqrt(re.data * re.data + im.data * im.data)
    safe = np.maximum(out, EPS)

    def bw(g):
        scale = np.where(out > 0, g / safe, 0.0)
        return scale * re.data, scale * im.data

    return Tensor._result(out, (re, im), "magnitude", bw)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Clamp from below; gradient is zero where the floor is active."""
    mask = a.data > floor
    return Tensor._result(np.where(mask, a.data, floor).astype(a.dtype), (a,), "maximum",
                          lambda g: (g * mask,))


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "abs": abs_, "log": log,
    "exp": exp, "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "sign": sign,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    fn = ELEMENTWISE[kind]
    return fn(a, b) if kind in ("add", "sub", "mul", "div") else fn(_as_tensor(a))


# ----------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._result(out, (a,), "sum", lambda g: (_expand(g, a.shape, axes, keepdims),))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise ValueError("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor._result(out, (a,), "mean",
                          lambda g: (_expand(g, a.shape, axes, keepdims) / n,))


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=True)
    # ties share the gradient equally
    mask = a.data == out
    count = mask.sum(axis=axes, keepdims=True)
    res = out if keepdims else np.squeeze(out, axis=axes)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axes)
        return (mask * g / count,)

    return Tensor._result(res, (a,), "max", bw)


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}[kind](a, axes, keepdims)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), "log_softmax", bw)


# ----------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._result(a.data.reshape(shape), (a,), "reshape",
                          lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), "transpose",
                          lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(out, (a,), "getitem", bw)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[..., index]`` for an integer index array of any shape."""
    index = np.asarray(index)
    out = a.data[..., index]
    n = a.shape[-1]

    def bw(g):
        lead = a.shape[:-1]
        flat_g = g.reshape(lead + (-1,))
        flat_i = index.reshape(-1)
        full = np.zeros(lead + (n,), dtype=a.dtype)
        rows = flat_g.reshape(-1, flat_g.shape[-1])
        acc = full.reshape(-1, n)
        for r in range(rows.shape[0]):
            acc[r] = np.bincount(flat_i, weights=rows[r], minlength=n)
        return (full,)

    return Tensor._result(out, (a,), "gather", bw)


def pick(a: Tensor, labels: np.ndarray) -> Tensor:
    """Select ``a[..., labels[...]]`` along the last axis (one entry per row)."""
    labels = np.asarray(labels)
    if labels.shape != a.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match {a.shape[:-1]}")
    idx = np.expand_dims(labels, -1)
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, -1), axis=-1)
        return (full,)

    return Tensor._result(out, (a,), "pick", bw)


def pad_last(a: Tensor, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad the last axis with zeros or by reflection (edge sample not repeated)."""
    n = a.shape[-1]
    if mode == "constant":
        widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
        out = np.pad(a.data, widths)
        return Tensor._result(out, (a,), "pad", lambda g: (g[..., left:left + n],))
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    if left >= n or right >= n:
        raise ValueError("reflect padding must be shorter than the signal")
    index = np.concatenate([np.arange(left, 0, -1), np.arange(n),
                            np.arange(n - 2, n - 2 - right, -1)]).astype(np.intp)
    return gather_last(a, index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), "concat", bw)


def frame(a: Tensor, frame_len: int, shift: int) -> Tensor:
    """Slice the last axis into overlapping frames: ``[..., L] -> [..., F, frame_len]``."""
    n = a.shape[-1]
    if n < frame_len:
        raise ValueError(f"signal of length {n} shorter than one frame ({frame_len})")
    n_frames = 1 + (n - frame_len) // shift
    strides = a.data.strides
    view = np.lib.stride_tricks.as_strided(
        a.data, a.shape[:-1] + (n_frames, frame_len), strides[:-1] + (strides[-1] * shift, strides[-1]),
        writeable=False)
    out = view.copy()

    def bw(g):
        full = np.zeros_like(a.data)
        span = shift * (n_frames - 1) + 1
        for j in range(frame_len):
            full[..., j:j + span:shift] += g[..., :, j]
        return (full,)

    return Tensor._result(out, (a,), "frame", bw)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), "matmul", bw)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B?, Cin, L]`` with ``w [Cout, Cin, K]``."""
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    c_out, c_in, k = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {xd.shape[1]}, kernel {c_in}")
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    length = xd.shape[-1]
    l_out = (length - dilation * (k - 1) - 1) // stride + 1
    if l_out <= 0:
        raise ValueError("conv1d output length would be non-positive")
    span = stride * (l_out - 1) + 1
    taps = [xd[:, :, j * dilation:j * dilation + span:stride] for j in range(k)]
    out = np.zeros((xd.shape[0], c_out, l_out), dtype=np.result_type(xd, w.data))
    for j in range(k):
        out += np.matmul(w.data[:, :, j], taps[j])

    def bw(g):
        g3 = g[None] if unbatched else g
        gw = np.empty_like(w.data)
        gx = np.zeros_like(xd)
        for j in range(k):
            gw[:, :, j] = np.einsum("bol,bil->oi", g3, taps[j])
            gx[:, :, j * dilation:j * dilation + span:stride] += np.matmul(w.data[:, :, j].T, g3)
        if padding:
            gx = gx[:, :, padding:length - padding]
        return (gx[0] if unbatched else gx), gw

    return Tensor._result(out[0] if unbatched else out, (x, w), "conv1d", bw)


def conv_transpose1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution of ``x [B?, Cin, L]`` with ``w [Cin, Cout, K]``.

    Output length is ``(L - 1) * stride + K``.
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    c_in, c_out, k = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"conv_transpose1d channel mismatch: input {xd.shape[1]}, kernel {c_in}")
    n = xd.shape[-1]
    l_out = (n - 1) * stride + k
    span = stride * (n - 1) + 1
    out = np.zeros((xd.shape[0], c_out, l_out), dtype=np.result_type(xd, w.data))
    for j in range(k):
        out[:, :, j:j + span:stride] += np.matmul(w.data[:, :, j].T, xd)

    def bw(g):
        g3 = g[None] if unbatched else g
        gx = np.zeros_like(xd)
        gw = np.empty_like(w.data)
        for j in range(k):
            gs = g3[:, :, j:j + span:stride]
            gx += np.matmul(w.data[:, :, j], gs)
            gw[:, :, j] = np.einsum("bil,bol->io", xd, gs)
        return (gx[0] if unbatched else gx), gw

    return Tensor._result(out[0] if unbatched else out, (x, w), "conv_transpose1d", bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
