"""Reverse-mode differentiation over dense float64 matrices.

Only the operations the model needs are provided. Every value is a 2-D array;
scalars are 1x1. A forward pass records parent links on each :class:`Tensor`;
:func:`gradients` walks that record backwards once and the record is dropped
with the tensors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from dualmix.errors import ContractError, DomainError, ShapeError

PARAMETER = "parameter"
CONSTANT = "constant"
INTERMEDIATE = "intermediate"


class Tensor:
    __slots__ = ("value", "role", "op", "parents", "_backward", "needs_grad", "name")

    def __init__(
        self,
        value,
        role: str = CONSTANT,
        op: str | None = None,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
        name: str | None = None,
    ):
        value = np.array(value, dtype=np.float64, ndmin=2)
        if value.ndim != 2:
            raise ShapeError(f"tensor values must be 2-D, got {value.ndim}-D")
        if role == INTERMEDIATE and not np.all(np.isfinite(value)):
            raise DomainError(f"non-finite value produced by {op}")
        self.value = value
        self.role = role
        self.op = op
        self.parents = parents
        self._backward = backward
        self.needs_grad = role == PARAMETER or any(p.needs_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op or self.role
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, role=PARAMETER, name=name)


def constant(value) -> Tensor:
    return Tensor(value, role=CONSTANT)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(value, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    return Tensor(value, role=INTERMEDIATE, op=op, parents=parents, backward=backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# --- forward ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _node(a.value - b.value, "subtract", (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, "multiply", (a, b), lambda g: (g * bv, g * av))


def row_multiply(x: Tensor, w: Tensor) -> Tensor:
    """Scale row ``i`` of ``x`` (n x h) by ``w[i, 0]`` (``w`` is n x 1)."""
    if w.shape != (x.shape[0], 1):
        raise ShapeError(f"row_multiply: weights {w.shape} for rows of {x.shape}")
    xv, wv = x.value, w.value
    return _node(
        xv * wv,
        "row_multiply",
        (x, w),
        lambda g: (g * wv, np.sum(g * xv, axis=1, keepdims=True)),
    )


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _node(np.log(x), "log", (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    """Softmax along ``axis`` (rows by default) with max subtraction."""
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), backward)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _node(
        out,
        "log_softmax",
        (a,),
        lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),),
    )


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: ``out[i, j] = |a_i - b_j|^2``.

    With a single-row ``b`` this is the distance of every row of ``a`` to it.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_dist: row widths {a.shape[1]} and {b.shape[1]}")
    av, bv = a.value, b.value
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _node(out, "sq_dist", (a, b), backward)


def convex_combine(a: Tensor, b: Tensor, lam: float) -> Tensor:
    """``lam * a + (1 - lam) * b``.

    The result is clamped to the elementwise range of ``a`` and ``b`` so that
    rounding never leaves the segment (``lam * x + (1 - lam) * x`` can miss
    ``x`` by an ulp). The gradient is that of the unclamped expression.
    """
    _same_shape("convex_combine", a, b)
    lam = float(lam)
    av, bv = a.value, b.value
    return _node(
        np.clip(lam * av + (1.0 - lam) * bv, np.minimum(av, bv), np.maximum(av, bv)),
        "convex_combine",
        (a, b),
        lambda g: (lam * g, (1.0 - lam) * g),
    )


def row_select(x: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"row_select: index out of range for {n} rows")

    def backward(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], "row_select", (x,), backward)


def vstack(rows: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors of equal width along rows."""
    if not rows:
        raise ShapeError("vstack of no tensors")
    width = rows[0].shape[1]
    if any(r.shape[1] != width for r in rows):
        raise ShapeError("vstack: row widths differ")
    bounds = np.cumsum([0] + [r.shape[0] for r in rows])
    return _node(
        np.vstack([r.value for r in rows]),
        "vstack",
        tuple(rows),
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(rows))),
    )


def row_mean(x: Tensor) -> Tensor:
    """Mean over rows, 1 x h."""
    m = x.shape[0]
    if m == 0:
        raise ShapeError("row_mean of an empty matrix")
    return _node(
        x.value.mean(axis=0, keepdims=True),
        "row_mean",
        (x,),
        lambda g: (np.broadcast_to(g / m, x.shape).copy(),),
    )


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = x.shape
    return _node(np.sum(x.value), "sum", (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.value.size)


# --- reverse pass --------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.needs_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every reachable parameter.

    Parameters in ``params`` that the loss does not depend on get zero
    gradients, so the result always covers the requested set.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be scalar (1x1), got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    found: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.role == PARAMETER:
            found[node] = g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.needs_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p not in found:
                found[p] = np.zeros_like(p.value)
    return found


class Adam:
    """Adam with bias-corrected moment estimates and optional L2 weight decay."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-2,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
