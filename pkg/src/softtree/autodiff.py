"""Reverse-mode automatic differentiation on dense numpy arrays.

A ``Tape`` records every differentiable operation executed while it is
active.  Because the recording order is an execution order, it is also a
topological order of the computation graph, so replaying the records in
reverse propagates gradients with exactly one visit per record.  Tensors
that require gradients accumulate into ``.grad`` (PyTorch-style: grads add
up until ``zero_grad``).

Only the generic machinery lives here (tensor type, tape, elementwise
math, reductions, reshape).  Layer primitives (convolution, normalization,
pooling, ...) are in :mod:`softtree.ops`.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, StateError

DEFAULT_DTYPE = np.float64

# Stack of active tapes; ``None`` entries mark no-grad regions.
_TAPE_STACK: list["Tape | None"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward pass; call ``backward`` on
    the resulting scalar afterwards.  A tape can be backpropagated once;
    ``reset`` clears it for reuse.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, object]] = []
        self.consumed = False

    @staticmethod
    def current() -> "Tape | None":
        return _TAPE_STACK[-1] if _TAPE_STACK else None

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, op: str, inputs: tuple, output: "Tensor", vjp) -> None:
        self.records.append((op, inputs, output, vjp))
        output._tape = self

    def reset(self) -> None:
        for _, _, out, _ in self.records:
            out._tape = None
        self.records.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


class Tensor:
    """Dense N-dimensional array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.decay = True  # weight-decay eligibility; layers clear it for biases/affine
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def apply_op(op: str, out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``vjp(g)`` must return one cotangent (numpy array or None) per input,
    in order.  Outside an active tape (or inside ``no_grad``) nothing is
    recorded and the output does not require grad: backward could never
    reach it.
    """
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that
    requires grad and participated in producing ``loss``."""
    if loss.size != 1:
        raise StateError(f"backward requires a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise StateError("tensor was not produced under an active tape")
    if tape.consumed:
        raise StateError("tape already backpropagated; call reset() before reusing it")
    tape.consumed = True
    loss.accumulate_grad(np.ones_like(loss.data))
    for op, inputs, out, vjp in reversed(tape.records):
        if out.grad is None:
            continue
        gs = vjp(out.grad)
        for t, g in zip(inputs, gs):
            if g is None or not t.requires_grad:
                continue
            t.accumulate_grad(g)


def assert_finite(t: Tensor, context: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {context}")


def first_nonfinite_op(tape: Tape) -> str | None:
    """Name of the earliest recorded op whose output is non-finite."""
    for op, _, out, _ in tape.records:
        if not np.all(np.isfinite(out.data)):
            return op
    return None


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients un-broadcast)
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(x, y):
    """Lift to tensors; python scalars adopt the other operand's dtype."""
    if isinstance(x, Tensor) and not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=x.dtype))
    elif isinstance(y, Tensor) and not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=y.dtype))
    return as_tensor(x), as_tensor(y)


def add(x, y) -> Tensor:
    x, y = _pair(x, y)
    out = x.data + y.data

    def vjp(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return apply_op("add", out, (x, y), vjp)


def sub(x, y) -> Tensor:
    x, y = _pair(x, y)
    out = x.data - y.data

    def vjp(g):
        return _unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)

    return apply_op("sub", out, (x, y), vjp)


def mul(x, y) -> Tensor:
    x, y = _pair(x, y)
    out = x.data * y.data
    xd, yd = x.data, y.data

    def vjp(g):
        return _unbroadcast(g * yd, x.shape), _unbroadcast(g * xd, y.shape)

    return apply_op("mul", out, (x, y), vjp)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return apply_op("neg", -x.data, (x,), lambda g: (-g,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return apply_op("log", np.log(xd), (x,), vjp)


def clamp(x, min_value=None, max_value=None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, min_value, max_value)
    mask = np.ones_like(x.data, dtype=bool)
    if min_value is not None:
        mask &= x.data >= min_value
    if max_value is not None:
        mask &= x.data <= max_value

    def vjp(g):
        return (g * mask,)

    return apply_op("clamp", out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return apply_op("reshape", out, (x,), vjp)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(a % len(in_shape) for a in axes))
        return (np.broadcast_to(g, in_shape).copy(),)

    return apply_op("sum", out, (x,), vjp)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    in_shape = x.shape
    count = x.size if axis is None else np.prod(
        [in_shape[a % len(in_shape)] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, in_shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(a % len(in_shape) for a in axes))
        return (np.broadcast_to(g / count, in_shape).copy(),)

    return apply_op("mean", out, (x,), vjp)


def select_rows(x, index) -> Tensor:
    """Pick one column per row: out[n] = x[n, index[n]]."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]
    in_shape = x.shape

    def vjp(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[rows, idx] = g
        return (gx,)

    return apply_op("select_rows", out, (x,), vjp)
