"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. While a Tape is active, every operation whose
inputs participate in gradient tracking appends a node (output + per-input
adjoint closures) to the tape; ``Tape.backward`` replays the nodes in exact
reverse execution order and accumulates gradients additively into the leaves.

Shapes are never broadcast implicitly, except scalar-with-tensor. Anything
fancier (cumulative norms, convolutions) is built either compositionally from
these primitives or as a fused op registered through :func:`custom_op`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayable in reverse for adjoints."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, list[tuple[Tensor, Callable]]]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, out: "Tensor", pulls: list[tuple["Tensor", Callable]]):
        self._nodes.append((out, pulls))
        self._produced.add(id(out))

    def backward(self, loss: "Tensor"):
        """Populate ``grad`` on every requires_grad leaf reachable from loss.

        Repeated calls accumulate. Intermediate adjoints live only for the
        duration of this call.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        adjoint: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for out, pulls in reversed(self._nodes):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for inp, pull in pulls:
                contrib = pull(g)
                if contrib is None:
                    continue
                if id(inp) in self._produced:
                    acc = adjoint.get(id(inp))
                    adjoint[id(inp)] = contrib if acc is None else acc + contrib
                elif inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += contrib.reshape(inp.data.shape)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Temporarily disable recording even if a tape is active."""
    saved = list(_TAPE_STACK)
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        _check_extents(shape)
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def full(shape, value, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        _check_extents(shape)
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad)

    @staticmethod
    def uniform(shape, low, high, rng: np.random.Generator,
                requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        _check_extents(shape)
        data = rng.uniform(low, high, size=shape).astype(dtype)
        return Tensor(data, requires_grad)

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method-style conveniences
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _check_extents(shape):
    extents = [shape] if np.isscalar(shape) else list(shape)
    if any(int(e) <= 0 for e in extents):
        raise ValueError(f"extents must be positive, got {extents}")


def _wrap(x, dtype) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor_create(shape, init="zeros", *, value=None, low=None, high=None,
                  rng: np.random.Generator | None = None, values=None,
                  requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform entry point for tensor construction used by configs and tests."""
    if init == "zeros":
        return Tensor.zeros(shape, requires_grad, dtype)
    if init == "constant":
        return Tensor.full(shape, value, requires_grad, dtype)
    if init == "uniform":
        if rng is None:
            raise ValueError("uniform init needs an rng")
        return Tensor.uniform(shape, low, high, rng, requires_grad, dtype)
    if init == "values":
        _check_extents(shape)
        data = np.asarray(values, dtype=dtype).reshape(shape)
        return Tensor(data, requires_grad)
    raise ValueError(f"unknown init {init!r}")


# -- op machinery ---------------------------------------------------------

def custom_op(out_data: np.ndarray, pulls: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Create the output of a (possibly fused) op and record it when needed.

    ``pulls`` pairs each input tensor with a closure mapping the output
    adjoint to that input's adjoint contribution.
    """
    tape = active_tape()
    track = tape is not None and any(
        t.requires_grad or id(t) in tape._produced for t, _ in pulls
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._append(out, [(t, f) for t, f in pulls])
    return out


def _binary_shapes(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    return custom_op(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    return custom_op(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    return custom_op(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


hadamard = mul


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    return custom_op(a.data / b.data, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    fns = {"add": add, "sub": sub, "mul": mul, "hadamard": mul}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](a, b)


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, [(a, lambda g: -g)])


def pow_(a: Tensor, p: float) -> Tensor:
    return custom_op(a.data ** p, [(a, lambda g: g * p * a.data ** (p - 1))])


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return custom_op(y, [(a, lambda g: g * 0.5 / y)])


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return custom_op(y, [(a, lambda g: g * y)])


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), [(a, lambda g: g / a.data)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return custom_op(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.full(a.shape, np.asarray(g).reshape(())[()], dtype=a.dtype)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True)

    return custom_op(np.asarray(y), [(a, pull)])


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a: Tensor, axis: int) -> Tensor:
    y = np.cumsum(a.data, axis=axis)

    def pull(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return custom_op(y, [(a, pull)])


def reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return custom_op(a.data.transpose(axes), [
        (a, lambda g: g.transpose(inv) if inv is not None else g.transpose()),
    ])


def getitem(a: Tensor, idx) -> Tensor:
    y = a.data[idx]

    def pull(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return custom_op(np.asarray(y), [(a, pull)])


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    y = np.concatenate([t.data for t in ts], axis=axis)
    pulls = []
    start = 0
    for t in ts:
        n = t.shape[axis]
        sl = [slice(None)] * y.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)
        pulls.append((t, lambda g, sl=sl: g[sl]))
        start += n
    return custom_op(y, pulls)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = np.broadcast_to(a.data, shape)

    def pull(g):
        gg = g
        # sum over prepended axes, then over axes expanded from extent 1
        extra = len(shape) - a.data.ndim
        if extra:
            gg = gg.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, e in enumerate(a.shape) if e == 1 and gg.shape[i] != 1)
        if keep:
            gg = gg.sum(axis=keep, keepdims=True)
        return gg

    return custom_op(y.copy(), [(a, pull)])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op(a.data * mask, [(a, lambda g: g * mask)])


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return custom_op(y, [(a, lambda g: g * y * (1.0 - y))])


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, [(a, lambda g: g * (1.0 - y * y))])
