"""Dense 2-D tensors with reverse-mode differentiation.

Every value is a float64 matrix. Operations record their parents only when
at least one input requires a gradient, so plain evaluation (line searches,
inference) builds no graph at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from graphprompt.errors import ShapeError


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        v = np.array(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={v.ndim}")
        self.values = v
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(v) if requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.values.size != 1:
            raise ShapeError("backward() starts from a scalar (1x1) tensor")
        order = _topological_order(self)
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.values)
        self.grad = self.grad + 1.0 if self.grad is not None else np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(values, True, parents, backward, op)
    return Tensor(values, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _result(a.values @ b.values, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} + {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accumulate(a, c * g)

    return _result(c * a.values, (a,), backward, "scale")


def scalar_mul(s, a) -> Tensor:
    """Multiply matrix ``a`` by a 1x1 tensor ``s``."""
    s, a = as_tensor(s), as_tensor(a)
    if s.shape != (1, 1):
        raise ShapeError(f"scalar_mul: scalar must be 1x1, got {s.shape}")
    sv = s.values[0, 0]

    def backward(g):
        _accumulate(s, np.array([[np.sum(g * a.values)]]))
        _accumulate(a, sv * g)

    return _result(sv * a.values, (s, a), backward, "scalar_mul")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")

    def backward(g):
        _accumulate(a, g * b.values)
        _accumulate(b, g * a.values)

    return _result(a.values * b.values, (a, b), backward, "mul")


def broadcast_add_row(m, row) -> Tensor:
    """Add a 1xF row vector to every row of an NxF matrix.

    The gradient reaching ``row`` is the column sum of the upstream gradient.
    """
    m, row = as_tensor(m), as_tensor(row)
    if row.shape[0] != 1 or row.shape[1] != m.shape[1]:
        raise ShapeError(f"broadcast_add_row: {m.shape} + {row.shape}")

    def backward(g):
        _accumulate(m, g)
        _accumulate(row, g.sum(axis=0, keepdims=True))

    return _result(m.values + row.values, (m, row), backward, "broadcast_add_row")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.values, 0.0), (a,), backward, "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.values)

    def backward(g):
        _accumulate(a, g * s * (1.0 - s))

    return _result(s, (a,), backward, "sigmoid")


def row_sum(m) -> Tensor:
    """Sum over rows: NxF -> 1xF."""
    m = as_tensor(m)

    def backward(g):
        _accumulate(m, np.broadcast_to(g, m.shape))

    return _result(m.values.sum(axis=0, keepdims=True), (m,), backward, "row_sum")


def row_mean(m) -> Tensor:
    """Mean over rows: NxF -> 1xF."""
    m = as_tensor(m)
    n = m.shape[0]

    def backward(g):
        _accumulate(m, np.broadcast_to(g / n, m.shape))

    return _result(m.values.sum(axis=0, keepdims=True) / n, (m,), backward, "row_mean")


def rowwise_dot(a, b) -> Tensor:
    """Per-row inner products: (NxF, NxF) -> Nx1."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_dot: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.values)
        _accumulate(b, g * a.values)

    return _result((a.values * b.values).sum(axis=1, keepdims=True), (a, b), backward, "rowwise_dot")


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.full(a.shape, g[0, 0]))

    return _result(np.array([[a.values.sum()]]), (a,), backward, "sum_all")


def _labels_column(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} predictions")
    return y


def bce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy on logits (Nx1 or 1xN) against {0,1} labels."""
    z = as_tensor(logits)
    if 1 not in z.shape:
        raise ShapeError(f"bce_loss expects a vector of logits, got {z.shape}")
    flat = z.values.reshape(-1, 1)
    y = _labels_column(labels, flat.shape[0])
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss labels must be 0 or 1")
    n = flat.shape[0]
    loss = np.maximum(flat, 0) - flat * y + np.log1p(np.exp(-np.abs(flat)))

    def backward(g):
        _accumulate(z, (g[0, 0] * (_sigmoid(flat) - y) / n).reshape(z.shape))

    return _result(np.array([[loss.mean()]]), (z,), backward, "bce_loss")


def mse_loss(a, b) -> Tensor:
    """Mean squared difference; ``b`` may be a tensor or a plain array."""
    a = as_tensor(a)
    b = as_tensor(b) if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64).reshape(a.shape))
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: {a.shape} vs {b.shape}")
    d = a.values - b.values
    n = d.size

    def backward(g):
        _accumulate(a, g[0, 0] * 2.0 * d / n)
        _accumulate(b, -g[0, 0] * 2.0 * d / n)

    return _result(np.array([[np.mean(d * d)]]), (a, b), backward, "mse_loss")


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    passed: bool
    worst: tuple[int, tuple[int, int]] | None = None


def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is ~0 from dividing
    finite-difference round-off by zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = [Tensor(np.array(as_tensor(x).values), requires_grad=True) for x in inputs]
    out = f(*leaves)
    if out.values.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value_at(k, idx, delta):
        vals = [Tensor(leaf.values) for leaf in leaves]
        v = vals[k].values.copy()
        v[idx] += delta
        vals[k] = Tensor(v)
        return f(*vals).item()

    max_rel = max_abs = 0.0
    worst = None
    for k, leaf in enumerate(leaves):
        for idx in np.ndindex(*leaf.shape):
            numeric = (value_at(k, idx, eps) - value_at(k, idx, -eps)) / (2 * eps)
            a = analytic[k][idx]
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), floor)
            max_abs = max(max_abs, err)
            if rel > max_rel:
                max_rel, worst = rel, (k, idx)
    return GradCheckReport(max_rel, max_abs, tol, max_rel <= tol, worst)
