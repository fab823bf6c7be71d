"""Dense float64 tensors with a reverse-mode gradient tape.

Every array the library differentiates flows through the ops in this
module. Computation happens eagerly in numpy; when a `Tape` is active,
each op appends a backward closure to it, and `backward()` replays the
tape in exact reverse order. Tapes are per-forward-pass and thrown away
after use.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NumericsError", "set_checked",
    "backward", "add", "sub", "mul", "div", "neg", "matmul",
    "tanh", "sigmoid", "relu", "exp", "log", "sqrt",
    "tsum", "tmean", "reshape", "transpose", "concat", "stack",
    "index", "gather_rows", "pick", "softmax", "log_softmax",
    "finite_diff_check",
]

_CHECKED = False


def set_checked(flag: bool) -> None:
    """Enable checked mode: any op producing NaN/Inf raises NumericsError."""
    global _CHECKED
    _CHECKED = bool(flag)


class ShapeError(ValueError):
    pass


class NumericsError(FloatingPointError):
    pass


def _check(arr: np.ndarray) -> np.ndarray:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NumericsError("non-finite value produced by tensor op")
    return arr


class Tensor:
    """A dense n-d array of float64 plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to module-level ops
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)


_TAPE: "Tape | None" = None


class Tape:
    """Append-only op log; append order is the topological order.

    Used as a context manager around one forward pass. Only one tape may
    be active at a time (computation is single-threaded per tape).
    """

    def __init__(self):
        self.nodes: list = []  # (out, inputs, bwd_fn)

    def __enter__(self) -> "Tape":
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _TAPE
        _TAPE = None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Register `out = op(inputs)` on the active tape, if any.

    `bwd(g)` must return one gradient array per input (None for inputs
    that need none), each already reduced to the input's shape.
    """
    tape = _TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append((out, inputs, bwd))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from `loss` on its tape.

    Leaves recorded on the tape but not contributing to the loss end up
    with zero gradients.
    """
    tape = loss.tape
    if tape is None:
        raise RuntimeError("loss is not on a tape (no gradients were recorded)")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, bwd in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = bwd(out.grad)
        for t, g in zip(inputs, grads):
            if t.requires_grad and g is not None:
                t.accumulate_grad(g)
    # leaves recorded on the tape but never reached get explicit zeros
    for _, inputs, _ in tape.nodes:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shapes(a, b, "add")
    out = Tensor(_check(a.data + b.data))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shapes(a, b, "sub")
    out = Tensor(_check(a.data - b.data))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shapes(a, b, "mul")
    out = Tensor(_check(a.data * b.data))

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shapes(a, b, "div")
    out = Tensor(_check(a.data / b.data))

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data)

    def bwd(g):
        return (-g,)

    return _record(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(_check(a.data @ b.data))

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # stable in both tails
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    y = _check(np.exp(a.data))
    out = Tensor(y)

    def bwd(g):
        return (g * y,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(_check(np.log(a.data)))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    y = _check(np.sqrt(a.data))
    out = Tensor(y)

    def bwd(g):
        return (g * 0.5 / y,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def bwd(g):
        inv = None if axes is None else np.argsort(axes)
        return (g.transpose(inv),)

    return _record(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in pieces)

    return _record(out, tuple(tensors), bwd)


def index(a, key) -> Tensor:
    """Basic (non-repeating) slicing; gradients scatter back into place."""
    a = _wrap(a)
    out = Tensor(a.data[key].copy())

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _record(out, (a,), bwd)


def gather_rows(a, ids) -> Tensor:
    """Rows of a 2-d tensor by integer index; duplicates accumulate."""
    a = _wrap(a)
    ids = np.asarray(ids, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got {a.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.data.shape[0]):
        raise IndexError(
            f"row index out of range [0, {a.data.shape[0]}): {ids}")
    out = Tensor(a.data[ids])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, ids, g)
        return (ga,)

    return _record(out, (a,), bwd)


def pick(a, cols) -> Tensor:
    """a[i, cols[i]] for each row i of a 2-d tensor."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, cols])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# normalized exponentials


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_check(y))

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(_check(y))

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, theta: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central differences.

    Per coordinate: |analytic - (f(x+eps) - f(x-eps)) / 2eps| / max(1, |analytic|).
    `f` must be deterministic and map `theta` to a scalar Tensor.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    theta.zero_grad()
    with Tape():
        out = f(theta)
        backward(out)
    if theta.grad is None:
        analytic = np.zeros_like(theta.data)
    else:
        analytic = theta.grad.copy()

    flat = theta.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(theta).item()
        flat[i] = orig - eps
        lo = f(theta).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericsError("finite differences hit a non-finite value")
        fd = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - fd) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
