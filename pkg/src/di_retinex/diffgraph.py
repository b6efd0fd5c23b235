"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations executed inside an active :class:`Tape` on tensors that require
gradients are recorded in creation order, which is already a topological
order. Outside a tape every op is a plain numpy evaluation, so inference
pays no bookkeeping cost.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss, [w])[0]
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def is_recording() -> bool:
    """True inside a :class:`Tape` context on this thread."""
    return _active_tape() is not None


class Tensor:
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tape:
    """Thread-local recording context; nested tapes shadow outer ones."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``params`` (zeros if unreachable).

        Also stores each gradient on ``param.grad``.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for p in params:
            g = grads.get(id(p))
            g = np.zeros_like(p.data) if g is None else np.broadcast_to(g, p.shape).copy()
            p.grad = g
            out.append(g)
        return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.backward(loss, params)


# --- elementwise arithmetic -------------------------------------------------


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return _node(x.data + y.data, (x, y),
                 lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return _node(x.data - y.data, (x, y),
                 lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return _node(x.data * y.data, (x, y),
                 lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)))


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = x.data / y.data
    return _node(out, (x, y),
                 lambda g: (_unbroadcast(g / y.data, x.shape),
                            _unbroadcast(-g * out / y.data, y.shape)))


def power(x, p: float) -> Tensor:
    """x ** p for a fixed exponent; x must be >= 0 unless p is an integer.

    At x == 0 the derivative is taken as 0 when p < 1 (the floored branch).
    """
    x = as_tensor(x)
    p = float(p)
    out = np.power(x.data, p)

    def vjp(g):
        if p == 1.0:
            return (g,)
        if p > 1.0 or p.is_integer():
            return (g * p * np.power(x.data, p - 1.0),)
        pos = x.data > 0
        d = np.where(pos, p * np.power(np.where(pos, x.data, 1.0), p - 1.0), 0.0)
        return (g * d,)

    return _node(out, (x,), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    # np.maximum propagates NaN, so a diverged network is not silently zeroed
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * keep,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def tan(x) -> Tensor:
    x = as_tensor(x)
    out = np.tan(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 + out * out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# --- reductions and indexing --------------------------------------------------


def tsum(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return _node(out, (x,), vjp)


def channel_var(x) -> Tensor:
    """Population variance over the spatial axes of H x W x C; returns shape (C,)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"channel_var expects H x W x C, got {x.shape}")
    n = x.shape[0] * x.shape[1]
    centred = x.data - x.data.mean(axis=(0, 1), keepdims=True)
    out = (centred * centred).mean(axis=(0, 1))
    return _node(out, (x,), lambda g: (g * (2.0 / n) * centred,))


def masked_mean(x, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where the constant ``mask`` is 1; 0 if none are."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    count = mask.sum()
    if count == 0:
        return _node(np.asarray(0.0), (x,), lambda g: (np.zeros(x.shape),))
    out = np.asarray((x.data * mask).sum() / count)
    return _node(out, (x,), lambda g: (g * mask / count,))


def take(x, idx) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return _node(x.data[idx], (x,), vjp)


# --- convolution ----------------------------------------------------------


def conv2d(x, w, b) -> Tensor:
    """3x3, stride 1, zero-pad 1 convolution: H x W x Cin -> H x W x Cout."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"conv2d input must be H x W x C with H, W >= 1, got {x.shape}")
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d weights must be Cout x Cin x 3 x 3, got {w.shape}")
    if w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[2]}, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias must have shape ({w.shape[0]},), got {b.shape}")
    out = _kernels.conv3x3(x.data, w.data, b.data)

    def vjp(g):
        gx = _kernels.conv3x3_input_grad(g, w.data) if x.requires_grad else None
        gw = _kernels.conv3x3_weight_grad(x.data, g) if w.requires_grad else None
        gb = g.sum(axis=(0, 1)) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), vjp)


# --- initialization and optimizer --------------------------------------------


def init_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    s = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> AdamState:
        st = cls(**hyper)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place, with coupled L2 weight decay.

    Raises NumericError (leaving params and state untouched) on a non-finite gradient.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and moment buffers differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; Adam step aborted")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
