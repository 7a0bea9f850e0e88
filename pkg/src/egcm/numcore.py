"""Dense float64 arithmetic with a small reverse-mode autodiff tape.

Every primitive takes :class:`Tensor` (or plain arrays, which are wrapped as
constants) and returns a new ``Tensor`` that remembers its parents and a
closure computing the vector-Jacobian product. :func:`backward` replays the
recorded graph in reverse topological order.

The module also carries the Adam optimizer and a central-difference gradient
checker used to validate the whole training objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        # never mutate in place: a gradient array may be shared between parents
        if self.grad is None:
            self.grad = np.asarray(g, dtype=DTYPE)
        else:
            self.grad = self.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward if needs else None, op=op)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(out, (a, b), backward, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias rows)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward, "add")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), backward, "scale")


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * mask)

    return _node(out, (x,), backward, "relu")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p), inference is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        x._accumulate(g * mask)

    return _node(x.data * mask, (x,), backward, "dropout")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out, ts, backward, "concat")


def gather(a, index) -> Tensor:
    """Row gather ``a[index]``; ``index`` may be any integer array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = a.data[index]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, index, g)
        a._accumulate(acc)

    return _node(out, (a,), backward, "gather")


def spmm(mat, x, mat_t=None) -> Tensor:
    """Constant sparse (scipy) matrix times a dense tensor.

    ``mat_t`` may carry a precomputed transpose for the backward pass.
    """
    x = as_tensor(x)
    if mat.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {mat.shape} by {x.shape}")
    out = np.asarray(mat @ x.data)

    def backward(g):
        t = mat.T if mat_t is None else mat_t
        x._accumulate(np.asarray(t @ g))

    return _node(out, (x,), backward, "spmm")


def softmax_rows(x) -> Tensor:
    """Row-wise softmax with max-subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _node(y, (x,), backward, "softmax")


def total(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum()), (x,), backward, "sum")


def custom(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Register a fused primitive whose VJP is supplied by the caller.

    ``backward(g)`` must call ``parent._accumulate`` for every parent that
    requires grad.
    """
    return _node(np.asarray(data, dtype=DTYPE), tuple(parents), backward, op)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns one gradient array per entry of ``params`` (zeros when the loss
    does not depend on that parameter). Gradients are also left in ``.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    skipped: int
    worst: tuple[int, tuple[int, ...]] | None = None
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    kink_guard: bool = False,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` receives a list of tensors (one per array in ``params``) and must
    return a scalar tensor; it has to be a pure function of those values, so
    any randomness inside must be reseeded on each call. The relative error
    per coordinate is ``|g - g_fd| / max(1, |g|, |g_fd|)``.

    With ``max_coords`` set, a random subsample of that many coordinates is
    checked instead of all of them. ``kink_guard`` skips coordinates with
    ``|theta_i| < 10 h`` (for functions with a ReLU directly on parameters).
    """
    arrays = [np.array(p, dtype=DTYPE, copy=True) for p in params]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(f(leaves), leaves)

    coords = [(k, idx) for k, a in enumerate(arrays) for idx in np.ndindex(a.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    def value() -> float:
        return float(f([Tensor(a) for a in arrays]).data)

    worst_err, worst = 0.0, None
    per_param = [0.0] * len(arrays)
    skipped = 0
    for k, idx in coords:
        a = arrays[k]
        orig = a[idx]
        if kink_guard and abs(orig) < 10 * h:
            skipped += 1
            continue
        a[idx] = orig + h
        fp = value()
        a[idx] = orig - h
        fm = value()
        a[idx] = orig
        numeric = (fp - fm) / (2 * h)
        g = analytic[k][idx]
        err = abs(g - numeric) / max(1.0, abs(g), abs(numeric))
        per_param[k] = max(per_param[k], err)
        if err > worst_err:
            worst_err, worst = err, (k, idx)
    return GradCheckReport(worst_err, tol, len(coords) - skipped, skipped, worst, per_param)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(p, dtype=DTYPE) for p in params),
            v=tuple(np.zeros_like(p, dtype=DTYPE) for p in params),
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 0.01,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=tuple(new_m), v=tuple(new_v), step=t)
