"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (define-by-run).
Outside a tape context nothing is recorded, which is how inference runs::

    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y)
    tape.backward(loss)

Storage defaults to float32; reductions accumulate in float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    ``grad`` is allocated (zeros) for every tensor created with
    ``requires_grad=True``, so leaves that end up behind a stop-gradient
    still report a well-defined zero gradient after ``backward``.
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(values, dtype=dtype or getattr(values, "dtype", None) or DEFAULT_DTYPE, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.array(x), dtype=dtype)
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of the operations executed inside its context.

    Nodes are appended in execution order, so the list is already a
    topological order and ``backward`` simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, backward) -> None:
        node = _Node(inputs, output, backward)
        output._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for all reachable leaves."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or not any(n is loss._node for n in reversed(self.nodes)):
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += g.astype(inp.grad.dtype, copy=False)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


def backward(loss: Tensor) -> None:
    """Run backward on the tape that produced ``loss``."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("no active tape; call tape.backward(loss) after the with-block")
    tape.backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _make(values: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = needs
    out.name = None
    out.grad = None
    out._node = None
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward)
    return out


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row-vector bias for a matrix ``a``."""
    if a.shape == b.shape:
        return _make(a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.values * a.values.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (B, m, k) x (B, k, n) -> (B, m, n)."""
    if (
        a.values.ndim != 3
        or b.values.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return _make(av @ bv, (a, b), backward)


# -------------------------------------------------------------- nonlinearity


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.maximum(x.values, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    v = x.values.astype(np.float64)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    s = e / e.sum(axis=-1, keepdims=True)
    out_dtype = x.dtype

    def backward(g):
        g64 = g.astype(np.float64)
        dx = s * (g64 - (g64 * s).sum(axis=-1, keepdims=True))
        return (dx.astype(out_dtype),)

    return _make(s.astype(out_dtype), (x,), backward)


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        v = x.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(v, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        v = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(v, tensors, backward)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(0, 2), 1))``."""
    v = x.values[index]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.array(v), (x,), backward)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather rows of a matrix; repeated rows get summed gradients."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise ContractError(f"take_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return _make(x.values[rows], (x,), backward)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None) -> Tensor:
    v = np.sum(x.values, axis=axis, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(g.dtype),)

    return _make(np.asarray(v), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, accumulated in float64."""
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.values.astype(np.float64) - target.values.astype(np.float64)
    n = diff.size
    value = np.asarray(np.mean(diff * diff)).astype(pred.dtype)

    def backward(g):
        d = (2.0 / n) * diff * float(g)
        return d.astype(pred.dtype), (-d).astype(target.dtype)

    return _make(value, (pred, target), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x``; no gradient flows back through this edge."""
    out = Tensor.__new__(Tensor)
    out.values = x.values
    out.requires_grad = False
    out.name = x.name
    out.grad = None
    out._node = None
    return out
