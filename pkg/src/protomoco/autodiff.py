"""Dense tensors with tape-based reverse-mode differentiation and SGD.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. ``backward`` replays the tape in reverse,
visiting every recorded node once.

Storage is 32-bit by default; ``precision(np.float64)`` switches newly
created tensors to 64-bit, which the gradient checker uses.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from protomoco import rng as rngmod

_DTYPE: type = np.float32
_NODE_IDS = itertools.count()
_ACTIVE_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DegenerateVectorError(ValueError):
    """A vector's norm is too small to normalize."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


def default_dtype() -> type:
    return _DTYPE


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """An n-dimensional array with an optional gradient slot on the tape."""

    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.node = next(_NODE_IDS)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    # Closes over the values saved during the forward pass.
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Map node id to d(loss)/d(node) for every node the loss depends on."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        leaves: dict[int, np.ndarray] = {}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            for node, ig in zip(entry.inputs, entry.backward(g)):
                if ig is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + ig
                else:
                    grads[node] = ig
        leaves.update(grads)
        return leaves


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.node = next(_NODE_IDS)
    result.name = None
    result.requires_grad = False
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        tape = _ACTIVE_TAPES[-1]
        result.requires_grad = True
        for t in inputs:
            tape.tensors.setdefault(t.node, t)
        tape.tensors[result.node] = result

        def masked(g, _inputs=tuple(inputs)):
            return [ig if t.requires_grad else None for t, ig in zip(_inputs, backward(g))]

        tape.entries.append(TapeEntry(op, tuple(t.node for t in inputs), result.node, masked))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _cast(x: np.ndarray, like: np.ndarray) -> np.ndarray:
    return x.astype(like.dtype, copy=False)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def relu(x) -> Tensor:
    """Elementwise max(0, x); the gradient gate is 1 only where x > 0."""
    x = as_tensor(x)
    gate = x.data > 0
    out = np.where(gate, x.data, 0).astype(x.data.dtype)
    return _record("relu", (x,), out, lambda g: (g * gate,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= floor
    out = np.where(keep, x.data, floor).astype(x.data.dtype)
    return _record("clamp_min", (x,), out, lambda g: (g * keep,))


# -- reductions and shape --------------------------------------------------


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis), dtype=x.data.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), out, backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def take(x, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("take", (x,), out, backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, out, lambda g: np.split(g, bounds, axis=axis))


def logsumexp(x, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Max-shifted log-sum-exp; entries with ``where == False`` are excluded."""
    x = as_tensor(x)
    mask = np.ones(x.shape, dtype=bool) if where is None else np.broadcast_to(where, x.shape)
    if not np.all(mask.any(axis=axis)):
        raise ContractError("logsumexp over an empty set")
    shifted_src = np.where(mask, x.data, -np.inf)
    peak = shifted_src.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x.data - peak, 0)), 0)
    total = e.sum(axis=axis, keepdims=True)
    out = (np.log(total) + peak).squeeze(axis).astype(x.data.dtype)
    soft = e / total

    def backward(g):
        return ((np.expand_dims(g, axis) * soft).astype(x.data.dtype),)

    return _record("logsumexp", (x,), out, backward)


def norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis))
    safe = np.where(n > 0, n, 1)

    def backward(g):
        scale = np.where(n > 0, g / safe, 0)
        return ((np.expand_dims(scale, axis) * x.data).astype(x.data.dtype),)

    return _record("norm", (x,), n.astype(x.data.dtype), backward)


def l2_normalize(v, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateVectorError when any norm is at most ``eps``.
    """
    v = as_tensor(v)
    wide = v.data.astype(np.float64)
    n = np.sqrt((wide * wide).sum(axis=axis, keepdims=True))
    if np.any(n <= eps):
        raise DegenerateVectorError(f"cannot normalize a vector with norm <= {eps}")
    u = (wide / n).astype(v.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        u64 = wide / n
        proj = (g64 * u64).sum(axis=axis, keepdims=True)
        return (((g64 - proj * u64) / n).astype(v.data.dtype),)

    return _record("l2_normalize", (v,), u, backward)


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    out = a.data @ b.data
    return _record("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def _conv_extent(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x`` (C,H,W or N,C,H,W) with F,C,kh,kw kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    xs = x.data[None] if single else x.data
    if xs.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W input and F×C×kh×kw kernels, "
                             f"got {x.shape} and {kernels.shape}")
    n, c, h, w = xs.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d kernel {kernels.shape} larger than input {x.shape}")
    if stride < 1:
        raise ContractError("stride must be positive")
    ho, wo = _conv_extent(h, kh, stride), _conv_extent(w, kw, stride)
    win = sliding_window_view(xs, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def backward(g):
        gs = g[None] if single else g
        gmat = gs.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gx = np.zeros_like(xs)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        return (gx[0] if single else gx, gk)

    return _record("conv2d", (x, kernels), out, backward)


def avgpool2d(x, window: int) -> Tensor:
    """Mean over non-overlapping ``window``×``window`` blocks."""
    x = as_tensor(x)
    single = x.ndim == 3
    xs = x.data[None] if single else x.data
    if xs.ndim != 4:
        raise DimensionError(f"avgpool2d expects C×H×W or N×C×H×W, got {x.shape}")
    n, c, h, w = xs.shape
    if window < 1 or h % window or w % window:
        raise DimensionError(f"avgpool2d window {window} does not divide extent {h}×{w}")
    ho, wo = h // window, w // window
    out = xs.reshape(n, c, ho, window, wo, window).mean(axis=(3, 5)).astype(xs.dtype)
    if single:
        out = out[0]
    area = float(window * window)

    def backward(g):
        gs = g[None] if single else g
        gx = np.broadcast_to((gs / area)[:, :, :, None, :, None], (n, c, ho, window, wo, window))
        gx = gx.reshape(n, c, h, w).astype(xs.dtype)
        return (gx[0] if single else gx,)

    return _record("avgpool2d", (x,), out, backward)


# -- parameters and optimization ------------------------------------------


@dataclass
class ParameterSet:
    """Named weights with parallel gradient and velocity buffers."""

    weights: dict[str, Tensor]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, w in self.weights.items():
            w.requires_grad = True
            w.name = name
            self.grads.setdefault(name, np.zeros_like(w.data))
            self.velocity.setdefault(name, np.zeros_like(w.data))
            if self.grads[name].shape != w.shape or self.velocity[name].shape != w.shape:
                raise DimensionError(f"buffers for {name!r} do not match weight shape {w.shape}")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        return cls({name: Tensor(a, requires_grad=True) for name, a in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def __contains__(self, name: str) -> bool:
        return name in self.weights

    def names(self) -> list[str]:
        return list(self.weights)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: w.data.copy() for name, w in self.weights.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {n: Tensor(w.data, requires_grad=True) for n, w in self.weights.items()},
            {n: g.copy() for n, g in self.grads.items()},
            {n: v.copy() for n, v in self.velocity.items()},
        )

    def subset(self, prefix: str) -> "ParameterSet":
        """Parameters whose names start with ``prefix`` (shared tensors, fresh buffers)."""
        return ParameterSet({n: w for n, w in self.weights.items() if n.startswith(prefix)})

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)


def backward(tape: Tape, loss: Tensor, params: ParameterSet) -> ParameterSet:
    """Accumulate d(loss)/d(weight) into ``params.grads``."""
    grads = tape.gradients(loss)
    for name, w in params.weights.items():
        g = grads.get(w.node)
        if g is not None:
            params.grads[name] += g.astype(params.grads[name].dtype, copy=False)
    return params


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple[tuple[int, float], ...] = ((120, 0.1), (160, 0.1))

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ContractError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be non-negative, got {self.weight_decay}")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ContractError(f"schedule epochs must strictly increase: {epochs}")
        if any(mult <= 0 for _, mult in self.schedule):
            raise ContractError("schedule multipliers must be positive")


def lr_at_epoch(cfg: SgdConfig, epoch: int) -> float:
    """Base rate times every multiplier whose epoch has been reached."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    lr = cfg.learning_rate
    for start, mult in cfg.schedule:
        if start <= epoch:
            lr *= mult
    return lr


def sgd_step(params: ParameterSet, cfg: SgdConfig, lr: float | None = None) -> ParameterSet:
    """v <- momentum*v + (g + wd*theta); theta <- theta - lr*v; then zero the gradients."""
    lr = cfg.learning_rate if lr is None else lr
    for name, w in params.weights.items():
        v = params.velocity[name]
        step = params.grads[name] + cfg.weight_decay * w.data
        v *= cfg.momentum
        v += step
        if lr != 0:
            w.data -= (lr * v).astype(w.data.dtype)
    params.zero_grad()
    return params


def he_init(shape: Sequence[int], fan_in: int, seed: int | Sequence[int]) -> Tensor:
    """Zero-mean normal draws with variance 2/fan_in, fixed by ``seed``."""
    if fan_in <= 0:
        raise ContractError("fan_in must be positive")
    keys = (seed,) if isinstance(seed, int) else tuple(seed)
    gen = rngmod.stream(keys[0], "he_init", *keys[1:])
    values = gen.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)
    return Tensor(values, requires_grad=True)
