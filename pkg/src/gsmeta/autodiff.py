"""Minimal dense-tensor reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active record themselves on it
whenever one of their inputs requires a gradient. :func:`backward` walks the
tape in reverse and accumulates vector-Jacobian products.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> float(backward(tape, y)[x])
    6.0

Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NotScalarLoss, ShapeMismatch, ZeroVector

LEAKY_SLOPE = 0.01

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager; tapes nest per thread and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, inputs, vjp):
        self.nodes.append(_Node(op, out, inputs, vjp))


class Gradients(dict):
    """Tensor -> gradient mapping; tensors the loss never reached map to zeros."""

    def __missing__(self, key):
        return np.zeros_like(key.data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and not (isinstance(x, np.ndarray) and x.dtype.kind == "f"):
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else x.dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape.record(op, out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# elementwise unary --------------------------------------------------------


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # sign(0) == 0 is the chosen subgradient
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _emit("leaky_relu", out, (a,), lambda g: (np.where(pos, g, slope * g),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


# reductions and shape ops -------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _emit("sum", np.asarray(out), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _emit("mean", np.asarray(out), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / count,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, ts, vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch("transpose", a.shape)
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` (rows of an embedding table, say)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
        return (full,)

    return _emit("take", out, (a,), vjp)


def cosine_similarity(a, b, eps: float = 0.0) -> Tensor:
    """Cosine similarity along the last axis, broadcasting leading axes.

    Raises :class:`ZeroVector` when any involved vector has zero norm.
    """
    a, b = _pair(a, b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch("cosine_similarity", a.shape, b.shape) from None
    A = np.broadcast_to(a.data, shape)
    B = np.broadcast_to(b.data, shape)
    na = np.linalg.norm(A, axis=-1)
    nb = np.linalg.norm(B, axis=-1)
    if np.any(na <= eps) or np.any(nb <= eps):
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    dot = np.sum(A * B, axis=-1)
    denom = na * nb
    out = dot / denom

    def vjp(g):
        g = g[..., None]
        ga = g * (B / denom[..., None] - out[..., None] * A / (na ** 2)[..., None])
        gb = g * (A / denom[..., None] - out[..., None] * B / (nb ** 2)[..., None])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("cosine_similarity", out, (a, b), vjp)


def detach(a) -> Tensor:
    """Copy of ``a`` that never records and never receives a gradient."""
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False, dtype=a.dtype)


# backward -----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Exact reverse-mode gradient of scalar ``loss`` for every tensor on ``tape``.

    Gradients reaching a tensor along several paths are summed. The returned
    mapping holds an entry for every requires-grad tensor the loss depends on;
    those entries are also stored on ``tensor.grad``.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = acc.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in acc:
                acc[key] = acc[key] + gi
            else:
                acc[key] = np.asarray(gi, dtype=inp.dtype)
                seen[key] = inp
    grads = Gradients()
    for key, t in seen.items():
        if t.requires_grad or t is loss:
            g = acc[key].reshape(t.shape)
            t.grad = g
            grads[t] = g
    return grads


def numerical_gradient(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f`` with respect to each array."""
    base = [np.array(x, dtype=np.float64) for x in arrays]
    out = []
    for k, x in enumerate(base):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*[Tensor(a) for a in base]).item()
            flat[i] = orig - step
            lo = f(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Largest per-input relative error between reverse-mode and finite differences."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in arrays]
    with Tape() as tape:
        out = f(*leaves)
    grads = backward(tape, out)
    numeric = numerical_gradient(f, arrays, step)
    return max(relative_error(grads[t], n) for t, n in zip(leaves, numeric))
