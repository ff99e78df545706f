"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive builds a node holding its parents and a
closure that maps the output gradient to input gradients. Nodes carry a
monotonically increasing sequence number, so sorting reachable nodes by
descending sequence gives an exact reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import math

import numpy as np

from .errors import AxisError, BroadcastError, DomainError, RankError, ShapeError

_state = threading.local()
_seq = itertools.count()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.tapes = []
    return _state


def get_default_dtype():
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _st().dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``np.float64`` for gradient checks)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled() -> bool:
    return _st().grad_enabled


class _Node:
    __slots__ = ("seq", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    def release(self) -> None:
        self.parents = ()
        self.backward_fn = None


class GradTape:
    """Ordered record of the primitive operations executed inside its context.

    Usage::

        with GradTape() as tape:
            loss = f(x)
        tape.backward(loss)
        tape.clear()
    """

    def __init__(self):
        self.entries: list[tuple[_Node, Tensor]] = []

    def __enter__(self) -> "GradTape":
        _st().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _st().tapes.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ops(self) -> list[str]:
        return [node.op for node, _ in self.entries]

    def backward(self, loss: "Tensor", visit: Callable[[str], None] | None = None) -> None:
        entries = [(node, out) for node, out in self.entries if out._node is node]
        _replay(loss, [out for _, out in reversed(entries)], visit)

    def clear(self) -> None:
        for node, out in self.entries:
            node.release()
            if out._node is node:
                out._node = None
        self.entries.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    # basic properties
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_error()

    def _item_error(self):
        raise RankError(f"item() needs exactly one element, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # method sugar
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_default_dtype()))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor._wrap(np.ones_like(x.data))


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    st = _st()
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(op, parents, backward_fn)
        out._node = node
        for tape in st.tapes:
            tape.entries.append((node, out))
    return out


# graph traversal

def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(t._node.parents)
    found.sort(key=lambda t: t._node.seq, reverse=True)
    return found


def _replay(loss: Tensor, order: Sequence[Tensor], visit=None) -> None:
    if loss.data.size != 1:
        raise RankError(f"backward() needs a scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for t in order:
        g = pending.pop(id(t), None)
        node = t._node
        if g is None or node is None or node.backward_fn is None:
            continue
        if visit is not None:
            visit(node.op)
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


def backward(loss: Tensor, visit: Callable[[str], None] | None = None) -> None:
    """Populate ``.grad`` of every reachable leaf that requires gradients.

    Gradients accumulate into existing ``.grad`` buffers.
    """
    _replay(loss, _reachable(loss), visit)


# broadcasting helpers

def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise BroadcastError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero", operand=1)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value", operand=0)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value", operand=0)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


_UNARY = {"exp": exp, "log": log, "neg": neg, "relu": relu, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, log, neg, relu, gelu."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise BroadcastError(f"matmul batch dims {a.shape[:-2]} vs {b.shape[:-2]}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tuple(ts), bw, "concat")


def split(a, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"axis {axis} of size {n} is not divisible into {sections} parts")
    step = n // sections
    idx = [slice(None)] * a.ndim
    parts = []
    for i in range(sections):
        idx[axis] = slice(i * step, (i + 1) * step)
        parts.append(getitem(a, tuple(idx)))
    return parts


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# reductions

def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise AxisError(f"axis {ax} is out of range for rank {a.ndim}")
    return tuple(ax % a.ndim for ax in axes) if isinstance(axis, tuple) else axis % a.ndim


def _expand_grad(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand_grad(g, shape, axis, keepdims),), "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand_grad(g, shape, axis, keepdims) / count,), "mean")


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element in row-major order."""
    a = as_tensor(a)
    if isinstance(axis, tuple):
        raise AxisError("max reduces over a single axis or all axes")
    axis = _check_axis(a, axis)
    x = a.data
    if axis is None:
        flat = int(np.argmax(x))
        out = np.asarray(x.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * x.ndim)

        def bw(g):
            full = np.zeros(x.size, dtype=x.dtype)
            full[flat] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(x.shape),)
    else:
        arg = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, arg, axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def bw(g):
            full = np.zeros_like(x)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, arg, gk, axis)
            return (full,)

    return _make(out, (a,), bw, "max")


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    if op not in _REDUCERS:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCERS[op](a, axis, keepdims)


# normalizing maps

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise DomainError("softmax input contains NaN", operand=0)
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise DomainError("log_softmax input contains NaN", operand=0)
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def l2_normalize(a, axis: int = -1, eps: float | None = None) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    With ``eps=None`` a zero-norm slice raises NormalizationError; otherwise
    ``eps`` is added under the square root.
    """
    from .errors import NormalizationError

    a = as_tensor(a)
    sq = reduce_sum(a * a, axis=axis, keepdims=True)
    if eps is None:
        if np.any(sq.data <= np.finfo(a.dtype).tiny):
            raise NormalizationError("cannot normalize a zero-norm vector", operand=0)
        return a / sqrt(sq)
    return a / sqrt(sq + eps)


# convolutions

def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _depthwise_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded sliding windows as [c, kh*kw, b*h*w]."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + kh - 1, w + kw - 1), dtype=x.dtype)
    xp[:, :, kh // 2:kh // 2 + h, kw // 2:kw // 2 + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c, kh * kw, b * h * w)


def _depthwise_apply(cols: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    out = np.matmul(k.reshape(c, 1, -1), cols)
    return out.reshape(c, b, h, w).transpose(1, 0, 2, 3)


def conv2d_depthwise(x, kernel, bias=None) -> Tensor:
    """Per-channel 2-D convolution with zero "same" padding.

    x: [b, c, h, w]; kernel: [c, 1, kh, kw] with odd kh, kw; bias: [c] or None.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != 1:
        raise ShapeError(f"depthwise conv expects [b,c,h,w] and [c,1,kh,kw], got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    kc, _, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel has {kc} channels but input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
    k = kernel.data[:, 0]
    cols = _depthwise_cols(x.data, kh, kw)
    out = _depthwise_apply(cols, k, x.shape)
    parents = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gx = _depthwise_apply(_depthwise_cols(g, kh, kw), k[:, ::-1, ::-1], g.shape)
        if kernel.requires_grad:
            gflat = g.transpose(1, 0, 2, 3).reshape(c, b * h * w, 1)
            gk = np.matmul(cols, gflat).reshape(c, 1, kh, kw)
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, bw, "conv2d_depthwise")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation). weight: [c_out, c_in, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"weight expects {ci} input channels but input has {c}")
    xp = _pad_hw(x.data, padding, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"input {h}x{w} too small for kernel {kh}x{kw}")
    # cols: [b, ho, wo, c, kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            gp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += \
                        gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            gx = gp[:, :, padding:padding + h, padding:padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, bw, "conv2d")


