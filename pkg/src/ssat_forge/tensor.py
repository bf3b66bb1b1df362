"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation executed while a tensor that requires gradients
is among its inputs is appended to the active :class:`Tape`.  ``backward``
walks the tape in reverse and returns a :class:`GradientMap` holding the
gradient of a scalar loss with respect to every leaf that requires gradients.

Broadcasting is deliberately narrow.  Two operand shapes are compatible when

* they are equal,
* one is a suffix of the other (leading batch dimensions are broadcast), or
* they have the same rank and one of them has extent 1 wherever they differ
  (the shape a ``keepdims`` reduction produces).

Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "ShapeError",
    "TapeError",
    "UnknownOpError",
    "apply",
    "backward",
    "finite_difference_check",
    "get_tape",
    "reset_tape",
    "fresh_tape",
    "no_grad",
    "set_precision",
    "get_dtype",
    "precision",
    "tensor",
    "constant",
    "parameter",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar or detached loss, and similar."""


class UnknownOpError(KeyError):
    pass


# ---------------------------------------------------------------------------
# precision

_DTYPES = {32: np.float32, 64: np.float64}
_dtype: type = np.float64


def set_precision(bits: int) -> None:
    """Set the global floating point precision (32 or 64 bits)."""
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if previous is np.float64 else 32)


# ---------------------------------------------------------------------------
# tensors and the tape

_ids = itertools.count(1)


class Tensor:
    """Dense array with a gradient flag and an optional link to the tape."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _copy: bool = True):
        if _copy or not isinstance(data, np.ndarray) or data.dtype != _dtype:
            data = np.array(data, dtype=_dtype)
        self.data: np.ndarray = data
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = next(_ids) if requires_grad else None
        self.name = name
        self.is_leaf = True

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _copy=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic sugar
    def __add__(self, other):
        return apply("add", [self, other])

    def __radd__(self, other):
        return apply("add", [other, self])

    def __sub__(self, other):
        return apply("sub", [self, other])

    def __rsub__(self, other):
        return apply("sub", [other, self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=float(other))
        return apply("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=1.0 / float(other))
        return apply("div", [self, other])

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __pow__(self, exponent: float):
        return apply("power", [self], exponent=float(exponent))

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    # -- named ops
    def sum(self, axis=None, keepdims: bool = False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", [self], axes=axes or None)

    @property
    def T(self):
        return apply("transpose", [self], axes=None)

    def exp(self):
        return apply("exp", [self])

    def log(self):
        return apply("log", [self])

    def gelu(self):
        return apply("gelu", [self])

    def softmax(self, axis: int = -1):
        return apply("softmax", [self], axis=axis)

    def log_softmax(self, axis: int = -1):
        return apply("log_softmax", [self], axis=axis)

    def index_select(self, indices, axis: int = 0):
        return apply("index_select", [self], indices=indices, axis=axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=False, _copy=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class _Record:
    op_kind: str
    input_ids: tuple[int | None, ...]
    output_id: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of recorded operations for one forward pass."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._position: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self._position.clear()

    def record(self, op_kind: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        self._position[output.node_id] = len(self.records)
        self.records.append(_Record(op_kind, ids, output.node_id, vjp))

    def produced(self, node_id: int | None) -> bool:
        return node_id in self._position


_tape = Tape()
_recording = True


def get_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


@contextlib.contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Install an empty tape for the duration of the block."""
    global _tape
    previous, _tape = _tape, Tape()
    try:
        yield _tape
    finally:
        _tape = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


class GradientMap(dict):
    """Mapping ``node_id -> gradient array``; also indexable by the tensor itself."""

    def _key(self, key):
        return key.node_id if isinstance(key, Tensor) else key

    def __getitem__(self, key):
        return super().__getitem__(self._key(key))

    def __contains__(self, key):
        return super().__contains__(self._key(key))

    def get(self, key, default=None):
        return super().get(self._key(key), default)


def backward(loss: Tensor, tape: Tape | None = None) -> GradientMap:
    """Gradients of a scalar ``loss`` w.r.t. every requires-grad leaf on the tape.

    The tape is left untouched, so calling this twice returns identical maps.
    """
    tape = _tape if tape is None else tape
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is detached: it does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    if not tape.produced(loss.node_id):
        if loss.is_leaf:
            return GradientMap({loss.node_id: seed})
        raise TapeError("loss is detached: it was recorded on a tape that is not active or was reset")

    grads: dict[int, np.ndarray] = {loss.node_id: seed}
    stop = tape._position[loss.node_id]
    for rec in reversed(tape.records[: stop + 1]):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        for node, gin in zip(rec.input_ids, rec.vjp(g)):
            if node is None or gin is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gin
            else:
                grads[node] = gin
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    if len(a) == len(b):
        if all(x == y or y == 1 for x, y in zip(a, b)):
            return a
        if all(x == y or x == 1 for x, y in zip(a, b)):
            return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# op registry: each entry maps input arrays (+ attrs) to (output, vjp)

_OPS: dict[str, Callable] = {}


def _op(name):
    def register(fn):
        _OPS[name] = fn
        return fn

    return register


@_op("add")
def _add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_op("sub")
def _sub(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@_op("mul")
def _mul(a, b):
    _broadcast_shape("mul", a.shape, b.shape)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_op("div")
def _div(a, b):
    _broadcast_shape("div", a.shape, b.shape)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@_op("scale")
def _scale(a, factor: float):
    f = a.dtype.type(factor)
    return a * f, lambda g: (g * f,)


@_op("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if not (la == lb or la[len(la) - len(lb):] == lb or lb[len(lb) - len(la):] == la):
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold batch dims into one GEMM
        k, n = b.shape
        flat = a.reshape(-1, k)
        out = (flat @ b).reshape(a.shape[:-1] + (n,))

        def vjp_folded(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.T).reshape(a.shape), flat.T @ g2

        return out, vjp_folded
    out = a @ b

    def vjp(g):
        return (
            _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape),
        )

    return out, vjp


@_op("linear")
def _linear(x, weight, bias):
    """``x @ weight.T + bias`` with ``weight`` of shape ``(out, in)``."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bad parameter shapes {weight.shape} / {bias.shape}")
    if x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    flat = x.reshape(-1, weight.shape[1])
    out = flat @ weight.T
    out += bias
    n = weight.shape[0]

    def vjp(g):
        g2 = g.reshape(-1, n)
        return (g2 @ weight).reshape(x.shape), g2.T @ flat, g2.sum(axis=0)

    return out.reshape(x.shape[:-1] + (n,)), vjp


@_op("transpose")
def _transpose(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2-D input, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(x % a.ndim for x in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort([x % a.ndim for x in axes]))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inverse),)


@_op("reshape")
def _reshape(a, shape):
    if -1 not in shape and math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return out, lambda g: (g.reshape(a.shape),)


@_op("concat")
def _concat(*arrays, axis: int = 0):
    ref = arrays[0]
    ax = axis % ref.ndim
    for x in arrays[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[y.shape for y in arrays]} differ off axis {axis}")
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=ax))


@_op("index_select")
def _index_select(a, indices, axis: int = 0):
    """Gather along ``axis``; 2-D ``indices`` gather per row of axis 0."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.ndim == 1:
        if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
            raise ShapeError(f"index_select: index out of range for axis {axis} of {a.shape}")
        out = np.take(a, idx, axis=ax)

        def vjp(g):
            full = np.zeros_like(a)
            sl = [slice(None)] * a.ndim
            if len(np.unique(idx)) == len(idx):
                sl[ax] = idx
                full[tuple(sl)] = g
            else:
                moved = np.moveaxis(full, ax, 0)
                np.add.at(moved, idx, np.moveaxis(g, ax, 0))
            return (full,)

        return out, vjp
    if idx.ndim != 2 or ax != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"index_select: batched indices {idx.shape} need axis=1 and batch {a.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"index_select: index out of range for axis 1 of {a.shape}")
    rows = np.arange(a.shape[0])[:, None]
    out = a[rows, idx]

    def vjp_batched(g):
        full = np.zeros_like(a)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return out, vjp_batched


@_op("sum")
def _sum(a, axis=None, keepdims: bool = False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@_op("mean")
def _mean(a, axis=None, keepdims: bool = False):
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    out = a.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).copy(),)

    return out, vjp


@_op("power")
def _power(a, exponent: float):
    p = a.dtype.type(exponent)
    out = a**p
    return out, lambda g: (g * p * a ** (p - 1),)


# Elementwise kernels below run over blocks of rows so that temporaries stay
# cache resident; on large activations this roughly halves their cost.
_BLOCK_ELEMS = 1 << 16


def _row_blocks(shape) -> Iterator[slice]:
    width = shape[-1] if shape else 1
    rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
    step = max(1, _BLOCK_ELEMS // max(width, 1))
    for i in range(0, rows, step):
        yield slice(i, min(i + step, rows))


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)


@_op("normalize")
def _normalize(a, eps: float = 1e-6):
    """``(a - mean) / sqrt(var + eps)`` over the last axis."""
    e = a.dtype.type(eps)
    out = np.empty_like(a)
    inv = np.empty(a.shape[:-1] + (1,), dtype=a.dtype)
    a2, o2, i2 = _rows(a), _rows(out), _rows(inv)
    for sl in _row_blocks(a.shape):
        blk = o2[sl]
        np.subtract(a2[sl], a2[sl].mean(axis=-1, keepdims=True), out=blk)
        var = np.einsum("ij,ij->i", blk, blk)[:, None] / a.dtype.type(a.shape[-1])
        np.sqrt(var + e, out=var)
        np.divide(1.0, var, out=i2[sl])
        blk *= i2[sl]

    def vjp(g):
        gin = np.empty_like(g)
        g2, r2 = _rows(g), _rows(gin)
        for sl in _row_blocks(g.shape):
            gb, ob, blk = g2[sl], o2[sl], r2[sl]
            gx = np.einsum("ij,ij->i", gb, ob)[:, None] / a.dtype.type(a.shape[-1])
            np.multiply(ob, gx, out=blk)
            np.subtract(gb, blk, out=blk)
            blk -= gb.mean(axis=-1, keepdims=True)
            blk *= i2[sl]
        return (gin,)

    return out, vjp


@_op("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_op("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


# tanh-approximate GELU:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@_op("gelu")
def _gelu(a):
    c, k = a.dtype.type(_GELU_C), a.dtype.type(_GELU_A)
    out = np.empty_like(a)
    th = np.empty_like(a)
    a1, o1, t1 = a.reshape(-1), out.reshape(-1), th.reshape(-1)
    for i in range(0, a1.size, _BLOCK_ELEMS):
        x, t, o = a1[i : i + _BLOCK_ELEMS], t1[i : i + _BLOCK_ELEMS], o1[i : i + _BLOCK_ELEMS]
        np.multiply(x, x, out=t)
        t *= k
        t += 1.0
        t *= x
        t *= c
        np.tanh(t, out=t)
        np.add(t, 1.0, out=o)
        o *= 0.5
        o *= x

    def vjp(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        gin = np.empty_like(g)
        g1, r1 = g.reshape(-1), gin.reshape(-1)
        for i in range(0, a1.size, _BLOCK_ELEMS):
            x, t, u = a1[i : i + _BLOCK_ELEMS], t1[i : i + _BLOCK_ELEMS], r1[i : i + _BLOCK_ELEMS]
            s = x * x
            s *= 3.0 * k
            s += 1.0
            s *= x
            s *= 0.5 * c
            np.multiply(t, t, out=u)
            np.subtract(1.0, u, out=u)
            u *= s
            np.multiply(t, 0.5, out=s)
            u += s
            u += 0.5
            u *= g1[i : i + _BLOCK_ELEMS]
        return (gin,)

    return out, vjp


@_op("softmax")
def _softmax(a, axis: int = -1):
    if axis not in (-1, a.ndim - 1):
        moved = _softmax(np.moveaxis(a, axis, -1).copy(), -1)
        out = np.moveaxis(moved[0], -1, axis)
        return out, lambda g: (np.moveaxis(moved[1](np.moveaxis(g, axis, -1).copy())[0], -1, axis),)
    out = np.empty_like(a)
    a2, o2 = _rows(a), _rows(out)
    for sl in _row_blocks(a.shape):
        blk = o2[sl]
        np.subtract(a2[sl], a2[sl].max(axis=-1, keepdims=True), out=blk)
        np.exp(blk, out=blk)
        blk /= blk.sum(axis=-1, keepdims=True)

    def vjp(g):
        gin = np.empty_like(g)
        g2, r2 = _rows(g), _rows(gin)
        for sl in _row_blocks(g.shape):
            blk, ob = r2[sl], o2[sl]
            np.multiply(g2[sl], ob, out=blk)
            blk -= ob * blk.sum(axis=-1, keepdims=True)
        return (gin,)

    return out, vjp


@_op("log_softmax")
def _log_softmax(a, axis: int = -1):
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return out, vjp


def apply(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run ``op_kind`` on ``inputs`` and record it when any input needs grad."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {op_kind!r}") from None
    tensors = [x if isinstance(x, Tensor) else constant(x) for x in inputs]
    out, vjp = fn(*(t.data for t in tensors), **attrs)
    needs = _recording and any(t.requires_grad for t in tensors)
    result = Tensor(np.asarray(out, dtype=_dtype), requires_grad=needs, _copy=False)
    if needs:
        result.is_leaf = False
        _tape.record(op_kind, tensors, result, vjp)
    return result


def op_kinds() -> list[str]:
    return sorted(_OPS)


# functional aliases used throughout the package
def matmul(a, b):
    return apply("matmul", [a, b])


def linear(x, weight, bias):
    return apply("linear", [x, weight, bias])


def concat(tensors: Sequence, axis: int = 0):
    return apply("concat", list(tensors), axis=axis)


def softmax(x, axis: int = -1):
    return apply("softmax", [x], axis=axis)


def log_softmax(x, axis: int = -1):
    return apply("log_softmax", [x], axis=axis)


def gelu(x):
    return apply("gelu", [x])


def index_select(x, indices, axis: int = 0):
    return apply("index_select", [x], indices=indices, axis=axis)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    function: Callable[[Tensor], Tensor],
    point: Tensor,
    epsilon: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``point`` is perturbed in place and restored, so ``function`` may close over
    it (e.g. a model parameter) instead of using its argument.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not point.requires_grad:
        raise ValueError("point must require grad")
    with fresh_tape() as tape:
        value = function(point)
        if not np.all(np.isfinite(value.data)):
            raise FloatingPointError("function value is not finite")
        grads = backward(value, tape)
    analytic = grads.get(point)
    analytic = np.zeros(point.shape) if analytic is None else np.asarray(analytic, dtype=np.float64)
    flat = point.data.reshape(-1)
    index = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in index:
            saved = flat[i]
            flat[i] = saved + epsilon
            up = function(point).item()
            flat[i] = saved - epsilon
            down = function(point).item()
            flat[i] = saved
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"function value is not finite near coordinate {i}")
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
