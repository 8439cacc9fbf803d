"""Dense n-d value engine with reverse-mode differentiation.

Values carry a float32 buffer plus an optional same-shape gradient buffer.
Every operation records its parents and a backward closure, so a loss node
can sweep the implicit DAG in reverse topological order and accumulate
dLoss/dleaf into each leaf that requires a gradient.  Reductions (dot
products, sums, row normalizers) accumulate in float64 and round the result
back to float32 to bound drift.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, ValidationError

DTYPE = np.float32


class Value:
    """One node of the computation graph.

    `data` is a contiguous float32 array; `grad` has the same shape and is
    allocated lazily on first accumulation.  Nodes created by operations keep
    references to their parents and a closure that routes the incoming
    gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Value"] = (),
                 backward: Callable[[np.ndarray], None] | None = None, name: str = ""):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(DTYPE, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar value of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = self.name or "value"
        return f"Value({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are treated as broadcast constants
    def __add__(self, other):
        return add(self, _as_value(other))

    def __radd__(self, other):
        return add(_as_value(other), self)

    def __sub__(self, other):
        return sub(self, _as_value(other))

    def __rsub__(self, other):
        return sub(_as_value(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=DTYPE))


def _out(data, parents, backward, requires_grad=None) -> Value:
    if requires_grad is None:
        requires_grad = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=requires_grad,
                 parents=parents if requires_grad else (),
                 backward=backward if requires_grad else None)


def node(data, parents: Sequence[Value], backward: Callable[[np.ndarray], None]) -> Value:
    """Assemble a non-leaf value; for composite ops defined outside this module."""
    return _out(data, tuple(parents), backward)


def create(shape: Sequence[int], values, requires_grad: bool = False, name: str = "") -> Value:
    """Build a leaf from an explicit shape and a flat row-major sequence."""
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise ShapeError(f"extents must be >= 1, got {dims}")
    flat = np.asarray(values, dtype=DTYPE).reshape(-1)
    count = int(np.prod(dims)) if dims else 1
    if flat.size != count:
        raise ShapeError(f"{flat.size} values for shape {dims} ({count} elements)")
    if not np.all(np.isfinite(flat)):
        raise ValidationError("non-finite input values")
    return Value(flat.reshape(dims), requires_grad=requires_grad, name=name)


def leaf(data, requires_grad: bool = False, name: str = "") -> Value:
    """Wrap an existing array as a leaf value."""
    return Value(np.asarray(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")


def add(a: Value, b: Value) -> Value:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _out(out_data, (a, b), backward)


def sub(a: Value, b: Value) -> Value:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _out(out_data, (a, b), backward)


def mul(a: Value, b: Value) -> Value:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _out(out_data, (a, b), backward)


def scale(a: Value, c: float) -> Value:
    c = float(c)
    out_data = a.data * DTYPE(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * DTYPE(c))

    return _out(out_data, (a,), backward)


def matmul(a: Value, b: Value) -> Value:
    """2-d matrix product with float64 accumulation."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out_data = (a64 @ b64).astype(DTYPE)

    def backward(g):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            a.accumulate_grad((g64 @ b64.T).astype(DTYPE))
        if b.requires_grad:
            b.accumulate_grad((a64.T @ g64).astype(DTYPE))

    return _out(out_data, (a, b), backward)


def softmax_rows(t: Value) -> Value:
    """Row-wise softmax of a 2-d value, stabilized by row-max subtraction."""
    if t.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d value, got {t.shape}")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float64)
    s = (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)

    def backward(g):
        if t.requires_grad:
            inner = np.sum(g.astype(np.float64) * s, axis=1, keepdims=True)
            t.accumulate_grad((s * (g - inner)).astype(DTYPE))

    return _out(s, (t,), backward)


def reshape(a: Value, shape: Sequence[int]) -> Value:
    dims = tuple(int(d) for d in shape)
    if int(np.prod(dims)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.data.size} elements) to {dims}")
    out_data = a.data.reshape(dims)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _out(out_data, (a,), backward)


def transpose(a: Value, axes: Sequence[int]) -> Value:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for shape {a.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inverse)))

    return _out(out_data, (a,), backward)


def concat(parts: Sequence[Value], axis: int) -> Value:
    if not parts:
        raise ShapeError("concat of zero parts")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError("concat parts disagree on rank")
        for ax in range(ndim):
            if ax != axis % ndim and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(f"concat parts disagree on non-concat axis {ax}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis % ndim] for p in parts]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis % ndim] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _out(out_data, tuple(parts), backward)


def cols(a: Value, j0: int, j1: int) -> Value:
    """Contiguous column slice of a 2-d value."""
    if a.data.ndim != 2:
        raise ShapeError(f"cols expects a 2-d value, got {a.shape}")
    if not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError(f"column range [{j0},{j1}) outside width {a.shape[1]}")
    out_data = np.ascontiguousarray(a.data[:, j0:j1])

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, j0:j1] = g
            a.accumulate_grad(full)

    return _out(out_data, (a,), backward)


def rows(a: Value, index: Sequence[int]) -> Value:
    """Gather rows of a 2-d value by index (rows may repeat)."""
    if a.data.ndim != 2:
        raise ShapeError(f"rows expects a 2-d value, got {a.shape}")
    idx = np.asarray(index, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data, dtype=np.float64)
            np.add.at(full, idx, g.astype(np.float64))
            a.accumulate_grad(full.astype(DTYPE))

    return _out(out_data, (a,), backward)


def sum_all(a: Value) -> Value:
    """Sum of every element, as a shape-(1,) value (float64 accumulation)."""
    out_data = np.array([a.data.sum(dtype=np.float64)], dtype=DTYPE)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(a.shape, g.reshape(-1)[0], dtype=DTYPE))

    return _out(out_data, (a,), backward)


def mean_all(a: Value) -> Value:
    return scale(sum_all(a), 1.0 / a.data.size)


def backward(loss: Value) -> None:
    """Reverse sweep from a scalar loss; accumulates into leaf gradients."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # free interior storage; leaves keep theirs


def zero_grads(values: Sequence[Value]) -> None:
    for v in values:
        v.zero_grad()
