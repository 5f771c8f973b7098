"""Define-by-run reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` values are recorded on the active :class:`Tape`
(if any). :func:`backward` then walks the tape in reverse recording order,
visiting each application once, and returns gradients for the requested
leaves.

    with Tape() as tape:
        loss = reduce_sum(sigmoid(x @ w))
    gw, = backward(tape, loss, [w])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit
from scipy.special import logsumexp as _np_logsumexp


class ShapeError(ValueError):
    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class Tensor:
    __slots__ = ("data", "_node", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return subtract(self, o)

    def __rsub__(self, o):
        return subtract(o, self)

    def __mul__(self, o):
        return multiply(self, o)

    def __rmul__(self, o):
        return multiply(o, self)

    def __truediv__(self, o):
        return divide(self, o)

    def __rtruediv__(self, o):
        return divide(o, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Records primitive applications while active (``with Tape() as t``)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(name: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    t = Tensor(out)
    stack = _stack()
    if stack:
        node = _Node(name, tuple(inputs), t, backward_fn)
        t._node = node
        stack[-1].nodes.append(node)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_check(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("subtract", a, b)
    return _record("subtract", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("multiply", a, b)
    return _record("multiply", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def divide(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("divide", a, b)
    out = a.data / b.data
    return _record("divide", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", f"incompatible batch dims {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            # shared weight: fold the batch axes into one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bw)


# -- structural -----------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", str(e)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return [np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _record("concat", ts, out, bw)


def slice_(x: Tensor, idx) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data[idx]
    except IndexError as e:
        raise ShapeError("slice", str(e)) from None

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("slice", (x,), np.array(out, copy=True), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Reverse the last two axes by default, or permute by ``axes``."""
    x = _as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose", f"need at least 2 dims, got {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} do not permute {x.ndim} dims")
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", str(e)) from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


# -- reductions -------------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("reduce_sum", (x,), np.asarray(out), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1) if x.data.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("reduce_mean", (x,), np.asarray(out), bw)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = _np_logsumexp(x.data, axis=axis, keepdims=True)
    soft = np.exp(x.data - out)
    res = out if keepdims else np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _record("logsumexp", (x,), np.asarray(res), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), out, bw)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record("layer_norm", (x,), xhat, bw)


# -- elementwise unary ------------------------------------------------------------

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _record("gelu", (x,), x.data * cdf, lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = expit(x.data)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input dtype."""
    x = _as_tensor(x)
    src = x.dtype
    return _record("cast", (x,), x.data.astype(dtype), lambda g: (g.astype(src),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) via -logsumexp([0, -x]); stable for large |x|."""
    x = _as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    return _record("log_sigmoid", (x,), out, lambda g: (g * expit(-x.data),))


def log1mexp(x: Tensor) -> Tensor:
    """log(1 - exp(x)) for x < 0."""
    x = _as_tensor(x)
    a = x.data
    out = np.where(a > -math.log(2.0), np.log(-np.expm1(a)), np.log1p(-np.exp(a)))
    # d/dx log(1 - e^x) = -1 / (e^{-x} - 1)
    return _record("log1mexp", (x,), out, lambda g: (-g / np.expm1(-a),))


# -- gradients --------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``params``.

    Parameters that the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [
        np.asarray(grads.get(id(p), np.zeros_like(p.data)), dtype=p.dtype).reshape(p.shape)
        for p in params
    ]


def value_and_grad(fn: Callable[..., Tensor]):
    """Wrap ``fn(*tensors) -> scalar`` to return ``(value, grads)``."""

    def wrapped(*arrays):
        ts = [Tensor(a) for a in arrays]
        with Tape() as tape:
            out = fn(*ts)
        return float(out.data), backward(tape, out, ts)

    return wrapped
