"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every tensor produced by an operation records its parents, the op kind and a
closure that pushes the output gradient back to the parents.  Tensors carry a
monotonically increasing creation index, so sorting the reachable nodes by
that index gives a valid topological order without an explicit DFS.

Only row-wise broadcasting is supported: an operand of shape ``(1, d)`` may
be combined with one of shape ``(n, d)``.  Everything else must match.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
COS_FLOOR = 1e-12

_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of the caller was violated."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class NumericalError(FloatingPointError):
    """An operation produced a NaN or infinite value."""


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; always copied to a float64 array.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = _op
        self.parents = tuple(_parents)
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward):
    """Wrap ``data`` as an op output.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.op = op
    out.parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out._id = next(_counter)
    return out


def _check_rowwise(a, b, op):
    if a.ndim == 0 or b.ndim == 0 or a.shape == b.shape:
        return
    ok = (
        a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1]
        and (a.shape[0] == 1 or b.shape[0] == 1)
    )
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0, keepdims=True)


# --------------------------------------------------------------------------
# elementwise and linear-algebra ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; either side may be a scalar or a ``(1, d)`` bias row."""
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a.data, b.data, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a.data, b.data, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar or a ``(1, d)`` row."""
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a.data, b.data, "mul")

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _result(x.data.T.copy(), (x,), "transpose", lambda g: (g.T,))


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), "relu", lambda g: (g * active,))


def abs_(x) -> Tensor:
    """Elementwise absolute value with subgradient 0 at 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along the feature axis (axis 1)."""
    tensors = [as_tensor(t) for t in tensors]
    if any(t.data.ndim != 2 for t in tensors) or len({t.shape[0] for t in tensors}) != 1:
        raise ShapeError("concat: all inputs must be matrices with equal row count")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, "concat", backward)


def sum_(x, axis=None) -> Tensor:
    """Sum of all entries, or column sums (``axis=0``) kept as a ``(1, d)`` row."""
    x = as_tensor(x)
    if axis is None:
        out = np.asarray(x.data.sum())
    elif axis == 0:
        out = x.data.sum(axis=0, keepdims=True)
    else:
        raise ValueError("sum_ supports axis=None or axis=0")
    return _result(out, (x,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    return mul(sum_(x), 1.0 / x.size)


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax expects a matrix")
    p = _softmax_np(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), "softmax", backward)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_m weights[0, m] * tensors[m]`` with gradients for both sides."""
    tensors = [as_tensor(t) for t in tensors]
    weights = as_tensor(weights)
    if weights.shape != (1, len(tensors)):
        raise ShapeError("weighted_sum: weights must have shape (1, M)")
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError("weighted_sum: all tensors must share a shape")
    w = weights.data[0]
    out = np.zeros(tensors[0].shape)
    for wi, t in zip(w, tensors):
        out = out + wi * t.data

    def backward(g):
        gw = np.array([[float((g * t.data).sum()) for t in tensors]])
        return (*(g * wi for wi in w), gw)

    return _result(out, (*tensors, weights), "weighted_sum", backward)


def one_hot(labels, num_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_labels(labels, n, c):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    return labels


def softmax_cross_entropy(logits, labels, reduction="mean", weights=None):
    """Cross-entropy of the row-wise softmax against integer labels.

    Parameters
    ----------
    logits : Tensor
        ``(n, C)`` scores.
    labels : sequence of int
        Class index per row, each in ``[0, C)``.
    reduction : {"mean", "sum"}
        How per-row losses are combined.
    weights : array_like, optional
        Per-row weights applied before the reduction.  With ``"mean"`` the
        weighted sum is still divided by ``n``.

    Returns
    -------
    loss : Tensor
        Scalar loss.
    probs : Tensor
        Differentiable ``(n, C)`` probabilities.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("logits must be a matrix")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if reduction == "mean":
        scale = 1.0 / n
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = _log_softmax_np(logits.data)
    nll = -logp[np.arange(n), labels]
    p = np.exp(logp)
    y = one_hot(labels, c)

    def backward(g):
        return (float(g) * scale * w[:, None] * (p - y),)

    loss = _result(np.asarray(scale * float(w @ nll)), (logits,), "softmax_cross_entropy", backward)
    return loss, softmax(logits)


def kl_divergence(p, q) -> Tensor:
    """Sum over rows of ``KL(p_i || q_i)``.

    Uses ``0 * log(0 / q) = 0`` and floors ``q`` at ``PROB_FLOOR``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or np.any(np.abs(t.data.sum(axis=1) - 1.0) > 1e-9):
            raise DomainError(f"kl_divergence: rows of {name} are not probability vectors")
    qf = np.maximum(q.data, PROB_FLOOR)
    pos = p.data > 0
    log_ratio = np.log(np.where(pos, p.data, 1.0) / qf)
    total = float(np.where(pos, p.data * log_ratio, 0.0).sum())

    def backward(g):
        g = float(g)
        gp = g * np.where(pos, log_ratio + 1.0, 0.0)
        gq = -g * p.data / qf * (q.data >= PROB_FLOOR)
        return gp, gq

    return _result(np.asarray(max(total, 0.0)), (p, q), "kl_divergence", backward)


def cosine_similarity(a, b) -> Tensor:
    """Cosine between two tensors viewed as flat vectors.

    Defined as 0, with zero gradient, when the norm product is below
    ``COS_FLOOR``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = float(np.sqrt((a.data ** 2).sum()))
    nb = float(np.sqrt((b.data ** 2).sum()))
    denom = na * nb
    if denom < COS_FLOOR:
        return _result(np.asarray(0.0), (a, b), "cosine", lambda g: (None, None))
    cos = float((a.data * b.data).sum()) / denom

    def backward(g):
        g = float(g)
        ga = g * (b.data / denom - cos * a.data / na ** 2) if a.requires_grad else None
        gb = g * (a.data / denom - cos * b.data / nb ** 2) if b.requires_grad else None
        return ga, gb

    return _result(np.asarray(cos), (a, b), "cosine", backward)


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first).

    Creation indices increase monotonically, so an op output always sorts
    after its inputs.
    """
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate across calls until reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream = {loss._id: np.ones(loss.shape)}
    for node in reversed(graph_nodes(loss)):
        g = upstream.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if not np.all(np.isfinite(g)):
                    raise NumericalError("non-finite gradient reached a leaf")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = upstream.get(parent._id)
            upstream[parent._id] = pg if prev is None else prev + pg


def kink_margin(root: Tensor) -> float:
    """Smallest ``|x|`` fed to any ReLU or abs node under ``root`` (inf if none)."""
    margin = np.inf
    for node in graph_nodes(root):
        if node.op in ("relu", "abs"):
            margin = min(margin, float(np.min(np.abs(node.parents[0].data))))
    return margin


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


def sgd_step(params: Iterable[Tensor], lr: float, scale: float = 1.0) -> None:
    """In-place ``theta -= lr * scale * grad`` followed by zeroing the grads."""
    params = list(params)
    if lr <= 0:
        raise ContractError("lr must be positive")
    if scale < 0:
        raise ContractError("scale must be non-negative")
    for p in params:
        if p.grad is None:
            raise ContractError(f"missing gradient on {p!r}")
    for p in params:
        p.data -= lr * scale * p.grad
        p.grad = None


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def normwise_relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the whole array (0 when both vanish).

    Robust to entries far below the finite-difference round-off level, which
    dominate an elementwise ratio without carrying information.
    """
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0


def gradcheck(build: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare autodiff and central-difference gradients of ``build()``.

    ``build`` must construct a fresh scalar loss from the current values of
    ``params``.  Returns the worst normwise relative error over all
    parameter tensors.
    """
    for p in params:
        p.grad = None
    loss = build()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    worst = 0.0
    for p, a in zip(params, analytic):
        num = numerical_grad(lambda: build().item(), p.data, h)
        worst = max(worst, normwise_relative_error(a, num))
    return worst
