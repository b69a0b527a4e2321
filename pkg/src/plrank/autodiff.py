"""Define-by-run reverse-mode autodiff over dense float64 arrays.

A Tape records every op application in creation order; backward() replays the
records in reverse, which is a valid topological order for a define-by-run
graph. Elementwise binaries require identical shapes or a scalar operand;
anything else must go through an explicit broadcast_to/reshape, so shape bugs
fail loudly at op time instead of silently broadcasting.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation

Array = np.ndarray

# Additive attention masks use this instead of -inf: it absorbs any realistic
# score under float64 addition, and exp() underflows to an exact 0.0, so masked
# positions influence nothing at the bit level.
NEG_MASK = -1e30


class Node:
    __slots__ = ("parents", "backward_fn", "requires")

    def __init__(self, parents: tuple[int, ...], backward_fn, requires: bool):
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires = requires


class Tensor:
    __slots__ = ("data", "tape", "node_id", "requires")

    def __init__(self, data: Array, tape: "Tape", node_id: int, requires: bool):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.requires = requires

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node_id={self.node_id}, requires={self.requires})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __sub__(self, other):
        return add(self, scale(self._lift(other), -1.0))

    def __rsub__(self, other):
        return add(self._lift(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only op record; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_data: dict[int, Array] = {}

    def _record(self, data: Array, parents: tuple[int, ...], backward_fn, requires: bool) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node(parents, backward_fn, requires))
        return Tensor(data, self, node_id, requires)

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        t = self._record(arr, (), None, requires_grad)
        if requires_grad:
            self._param_data[t.node_id] = arr
        return t

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Accumulated gradients for every requires_grad leaf, keyed by node_id."""
        if loss.tape is not self:
            raise ContractViolation("loss belongs to a different tape")
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: list[Array | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for node_id in range(loss.node_id, -1, -1):
            g = grads[node_id]
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.backward_fn is None or not node.requires:
                continue
            contributions = node.backward_fn(g)
            for parent_id, contrib in zip(node.parents, contributions):
                if contrib is None or not self.nodes[parent_id].requires:
                    continue
                if grads[parent_id] is None:
                    grads[parent_id] = contrib
                else:
                    grads[parent_id] = grads[parent_id] + contrib
        out: dict[int, Array] = {}
        for pid, data in self._param_data.items():
            g = grads[pid]
            out[pid] = np.zeros_like(data) if g is None else np.ascontiguousarray(g)
        return out


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractViolation("operands were created on different tapes")
    return tape


def _check_elementwise(a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ContractViolation(
        f"elementwise op needs equal shapes or a scalar, got {a.data.shape} and {b.data.shape}"
    )


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to `shape` after numpy-style broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _check_elementwise(a, b)
    out = a.data + b.data
    requires = a.requires or b.requires

    def backward_fn(g: Array):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return tape._record(out, (a.node_id, b.node_id), backward_fn, requires)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _check_elementwise(a, b)
    out = a.data * b.data
    requires = a.requires or b.requires

    def backward_fn(g: Array):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return tape._record(out, (a.node_id, b.node_id), backward_fn, requires)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward_fn(g: Array):
        return (g * c,)

    return a.tape._record(out, (a.node_id,), backward_fn, a.requires)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation(
            f"matmul operands must be at least 2-d, got {a.data.shape} @ {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def backward_fn(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return tape._record(out, (a.node_id, b.node_id), backward_fn, a.requires or b.requires)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: Array):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return x.tape._record(y, (x.node_id,), backward_fn, x.requires)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def backward_fn(g: Array):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return x.tape._record(y, (x.node_id,), backward_fn, x.requires)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True)) + m
    soft = np.exp(x.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward_fn(g: Array):
        gg = g if keepdims else np.expand_dims(g, axis=axis)
        return (gg * soft,)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward_fn(g: Array):
        return (g / x.data,)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward_fn(g: Array):
        return (g * out,)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g: Array):
        return (g * (1.0 - out * out),)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward_fn(g: Array):
        return (g * (x.data > 0.0),)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def asum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g: Array):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis=_axis_tuple(axis, x.data.ndim))
        return (np.broadcast_to(gg, x.data.shape).copy() if np.ndim(gg) else np.full_like(x.data, gg),)

    return x.tape._record(np.asarray(out), (x.node_id,), backward_fn, x.requires)


# Contract-facing alias for the reduction op.
sum = asum  # noqa: A001


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    return scale(asum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def index_select(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation("index_select indices must be integers")
    if table.data.ndim < 1:
        raise ContractViolation("index_select table must have at least one axis")
    out = table.data[idx]

    def backward_fn(g: Array):
        gt = np.zeros_like(table.data)
        flat_idx = idx.reshape(-1)
        np.add.at(gt, flat_idx, g.reshape(flat_idx.shape[0], *table.data.shape[1:]))
        return (gt,)

    return table.tape._record(out, (table.node_id,), backward_fn, table.requires)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise ContractViolation("concat needs at least one tensor")
    tape = _same_tape(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record(
        out,
        tuple(t.node_id for t in tensors),
        backward_fn,
        any(t.requires for t in tensors),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward_fn(g: Array):
        return (g.reshape(x.data.shape),)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.data, a, b)

    def backward_fn(g: Array):
        return (np.swapaxes(g, a, b),)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(x.data, shape)

    def backward_fn(g: Array):
        return (_unbroadcast(g, x.data.shape),)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _check_elementwise(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward_fn(g: Array):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return tape._record(out, (a.node_id, b.node_id), backward_fn, a.requires or b.requires)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo <= hi:
        raise ContractViolation(f"clip needs lo <= hi, got [{lo}, {hi}]")
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g: Array):
        return (g * inside,)

    return x.tape._record(out, (x.node_id,), backward_fn, x.requires)


def fd_check(
    f: Callable[..., Tensor],
    params: Sequence[Array],
    h: float = 1e-5,
) -> float:
    """Worst relative error between backward() and central finite differences.

    `f` receives one leaf Tensor per entry of `params` (all requiring grad, on
    a fresh tape) and must return a scalar Tensor. Every parameter entry is
    probed with a central difference of step h.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]

    def run(arrays) -> tuple[float, list[Array]]:
        tape = Tape()
        leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
        out = f(*leaves)
        if out.data.size != 1:
            raise ContractViolation("fd_check target must return a scalar")
        grads = tape.backward(out)
        return float(out.data.reshape(())), [
            grads.get(leaf.node_id, np.zeros_like(a)) for leaf, a in zip(leaves, arrays)
        ]

    def value(arrays) -> float:
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        out = f(*leaves)
        return float(out.data.reshape(()))

    _, analytic = run(params)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = value(params)
            flat[j] = orig - h
            down = value(params)
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            a = analytic[pi].reshape(-1)[j]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
