"""Minimal dense tensor with a reverse-mode gradient tape.

Tensors wrap a contiguous row-major ``numpy`` array. Differentiable
operations executed while a :class:`GradTape` is active are recorded on it;
``tape.backward(loss)`` replays the records in strict reverse order and
accumulates gradients into the ``.grad`` buffers of leaf tensors that have
``requires_grad=True``.

Shapes must agree exactly for binary elementwise ops (no broadcasting).
Every op output is checked for NaN/Inf and raises :class:`NonFiniteError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "NonFiniteError", "TapeError",
    "tensor", "zeros", "ones", "precision", "get_dtype",
    "elementwise", "add", "sub", "mul", "div", "neg", "scale", "relu", "exp",
    "log", "square", "reduce", "sum", "mean", "max",
    "reshape", "transpose", "backward", "make_op",
]

_DTYPE = np.dtype(np.float32)
_TAPES: list["GradTape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


def get_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the working float dtype (e.g. ``np.float64`` for gradient checks)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        if self._tape is None:
            raise TapeError("tensor was not produced under an active GradTape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})\n{self.data!r}"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis=None):
        return max(self, axis)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(like.shape, x, dtype=like.data.dtype))
    return Tensor(x, dtype=like.data.dtype)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


class GradTape:
    """Ordered record of differentiable operations.

    One tape serves one backward pass; calling :meth:`backward` a second
    time raises :class:`TapeError`.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable):
        if self._consumed:
            raise TapeError("tape already consumed")
        out._tape = self
        self._records.append((out, inputs, fn))

    def backward(self, loss: Tensor, visit: Callable[[Tensor], None] | None = None):
        if self._consumed:
            raise TapeError("tape already consumed")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True
        produced = {id(out) for out, _, _ in self._records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if visit is not None:
                visit(out)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
                else:
                    gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self._records.clear()


def backward(loss: Tensor):
    """Backpropagate ``loss`` through the tape that recorded it."""
    loss.backward()


def _check_finite(arr: np.ndarray, name: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {name}")


def make_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    _check_finite(data, name)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req and _TAPES:
        _TAPES[-1]._record(out, tuple(inputs), fn)
    return out


# -- elementwise ------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return make_op("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return make_op("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


_UNARY = {"neg": neg, "relu": relu, "exp": exp, "log": log, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if b is None:
        if kind not in _UNARY:
            raise ValueError(f"unknown unary op {kind!r}")
        return _UNARY[kind](a)
    if kind not in _BINARY:
        raise ValueError(f"unknown binary op {kind!r}")
    return _BINARY[kind](a, b)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError("repeated axis")
    return tuple(sorted(out))


def _expand(g: np.ndarray, shape, axes):
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


def sum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[i] == 0 for i in axes):
        raise ValueError("empty reduction extent")
    out = np.sum(a.data, axis=axes, dtype=np.float64).astype(a.data.dtype)
    shape = a.shape
    return make_op("sum", np.asarray(out), (a,), lambda g: (_expand(g, shape, axes),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ValueError("empty reduction extent")
    out = np.mean(a.data, axis=axes, dtype=np.float64).astype(a.data.dtype)
    shape = a.shape
    return make_op("mean", np.asarray(out), (a,), lambda g: (_expand(g, shape, axes) / n,))


def max(a: Tensor, axis=None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry on ties."""
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[i] == 0 for i in axes):
        raise ValueError("empty reduction extent")
    rest = [i for i in range(a.ndim) if i not in axes]
    perm = rest + list(axes)
    moved = np.transpose(a.data, perm)
    flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)

    def fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), inv),)

    return make_op("max", np.ascontiguousarray(out), (a,), fn)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduction {kind!r}")
    return _REDUCE[kind](a, axis)


# -- shape ops ------------------------------------------------------------------

def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return make_op("transpose", out, (a,), lambda g: (np.transpose(g, inv),))
