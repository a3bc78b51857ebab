"""Small dense reverse-mode autodiff engine on top of numpy.

Every op takes :class:`Node` inputs, computes a float64 value eagerly and,
when gradients are enabled, records a closure that maps the upstream
gradient to gradients for its parents. ``Node.backward`` walks the recorded
graph in reverse topological order. Graphs are rebuilt on every forward pass,
so variable path lengths and per-step masks need no special handling.

Arrays may carry leading batch dimensions; ``matmul`` follows ``np.matmul``
and elementwise ops broadcast like numpy, with gradients summed back to the
input shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-7

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the backward graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """A value on the tape plus its accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op="leaf"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable node."""
        if seed is None:
            if self.value.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _topological(self)
        for node in order:
            if node.parents and node is not self:
                node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


def _make(value, parents: Sequence[Node], backward_fn: Callable, op: str) -> Node:
    _check(value, op)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Node(value, op=op)
    return Node(value, tuple(parents), backward_fn, True, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def constant(x) -> Node:
    arr = np.array(x, dtype=np.float64)
    return Node(_check(arr, "constant"))


def parameter(x) -> Node:
    arr = np.array(x, dtype=np.float64)
    node = Node(_check(arr, "parameter"), requires_grad=True, op="param")
    node.zero_grad()
    return node


# ---------------------------------------------------------------- linear ops


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(av, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, av.shape),
            None if gb is None else _unbroadcast(gb, bv.shape),
        )

    return _make(np.matmul(av, bv), (a, b), backward, "matmul")


def add(a: Node, b: Node) -> Node:
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with broadcasting."""
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    av, bv = a.value, b.value
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(a: Node, k: float) -> Node:
    return _make(a.value * k, (a,), lambda g: (g * k,), "scale")


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    cuts = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(out, tuple(nodes), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def split(a: Node, sections: int, axis: int = -1) -> list[Node]:
    """Split into ``sections`` equal parts along ``axis``."""
    if a.shape[axis] % sections:
        raise DimensionError(f"cannot split width {a.shape[axis]} into {sections}")
    width = a.shape[axis] // sections
    parts = []
    for k in range(sections):
        index = [slice(None)] * a.value.ndim
        index[axis] = slice(k * width, (k + 1) * width)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(a.value)
            full[index] = g
            return (full,)

        parts.append(_make(a.value[index], (a,), backward, "split"))
    return parts


def reshape(a: Node, shape) -> Node:
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def gather_rows(table: Node, index) -> Node:
    """Embedding lookup ``table[index]``; backward scatter-adds into the table."""
    idx = np.asarray(index, dtype=np.intp)
    rows = table.shape[0]
    if idx.size and (idx.min() < -rows or idx.max() >= rows or idx.min() < 0):
        raise IndexError(f"row index out of range for table with {rows} rows")

    def backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.value[idx], (table,), backward, "gather")


def total(a: Node, axis=None, keepdims: bool = False) -> Node:
    """Sum over ``axis`` (all axes by default)."""
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(total(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- nonlinear ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def log(a: Node, eps: float | None = None) -> Node:
    """Natural log; with ``eps`` the input is clamped from below first."""
    x = a.value
    if eps is not None:
        inside = x >= eps
        x = np.maximum(x, eps)
    elif np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    else:
        inside = None

    def backward(g):
        d = g / x
        return (d if inside is None else d * inside,)

    return _make(np.log(x), (a,), backward, "log")


def masked_softmax(scores: Node, mask=None) -> Node:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    s = scores.value
    allowed = np.ones(s.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    if not np.all(allowed.any(axis=-1)):
        raise ValueError("masked_softmax needs at least one allowed entry per row")
    top = np.max(np.where(allowed, s, -np.inf), axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(np.where(allowed, s - top, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (scores,), backward, "masked_softmax")


def softmax(scores: Node) -> Node:
    return masked_softmax(scores, None)


def bce(pred: Node, target) -> Node:
    """Elementwise binary cross-entropy with predictions clamped to [EPS, 1-EPS]."""
    y = np.asarray(target, dtype=np.float64)
    if np.any(y < 0) or np.any(y > 1) or not np.all(np.isfinite(y)):
        raise ValueError("bce target must lie in [0, 1]")
    raw = pred.value
    p = np.clip(raw, EPS, 1.0 - EPS)
    inside = (raw >= EPS) & (raw <= 1.0 - EPS)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def backward(g):
        return (_unbroadcast(g * (p - y) / (p * (1.0 - p)) * inside, raw.shape),)

    return _make(out, (pred,), backward, "bce")


def dropout(a: Node, rate: float, rng: np.random.Generator) -> Node:
    """Inverted dropout; identity when ``rate`` is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Node(keep))


# ---------------------------------------------------------------- LSTM


def lstm_step(x: Node, h: Node, c: Node, weight: Node, bias: Node) -> tuple[Node, Node]:
    """One LSTM cell update with gate order (input, forget, candidate, output).

    ``weight`` has shape (input + hidden, 4 * hidden) acting on ``[x; h]``.
    """
    hidden = h.shape[-1]
    if c.shape[-1] != hidden or weight.shape[-1] != 4 * hidden:
        raise DimensionError("LSTM hidden width mismatch")
    if weight.shape[0] != x.shape[-1] + hidden:
        raise DimensionError(
            f"LSTM expects input width {weight.shape[0] - hidden}, got {x.shape[-1]}"
        )
    z = add(matmul(concat([x, h], axis=-1), weight), bias)
    zi, zf, zg, zo = split(z, 4, axis=-1)
    i, f, o = sigmoid(zi), sigmoid(zf), sigmoid(zo)
    g = tanh(zg)
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------- checking


def grad_report(loss_fn: Callable[[], Node], params: Iterable[Node], eps: float = 1e-5) -> list[dict]:
    """Backprop vs central differences for every parameter tensor.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    be deterministic. For each tensor the report holds the tensor-level
    relative error ``|a - n| / max(|a|, |n|, 1e-8)`` with ``|.|`` the
    Euclidean norm, and the worst entrywise value of the same formula.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError("loss is not finite")
    loss.backward()
    report = []
    with no_grad():
        for p in params:
            analytic = p.grad.reshape(-1).copy()
            numeric = np.zeros_like(analytic)
            flat = p.value.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(np.sum(loss_fn().value))
                flat[k] = orig - eps
                down = float(np.sum(loss_fn().value))
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError("loss is not finite under perturbation")
                numeric[k] = (up - down) / (2 * eps)
            diff = np.abs(analytic - numeric)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            norm_denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
            report.append(
                {
                    "shape": p.shape,
                    "rel_error": float(np.linalg.norm(analytic - numeric) / norm_denom),
                    "max_entry_error": float(np.max(diff / denom)),
                    "max_abs_diff": float(np.max(diff)),
                }
            )
    return report


def grad_check(loss_fn: Callable[[], Node], params: Iterable[Node], eps: float = 1e-5, entrywise: bool = False) -> float:
    """Max relative error between backprop and central differences.

    By default the error is measured per parameter tensor; ``entrywise``
    takes the worst single entry instead, which central differences cannot
    resolve for entries whose gradient is near the roundoff floor.
    """
    key = "max_entry_error" if entrywise else "rel_error"
    return max(r[key] for r in grad_report(loss_fn, params, eps))
