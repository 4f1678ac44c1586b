"""Dense tensors with taped reverse-mode gradients.

Every operation the model needs is a primitive here with a hand-derived
gradient rule. A forward pass links Tensors into a DAG through their parents;
``backward`` walks a topological tape of that DAG once, in reverse, and
accumulates gradients into every tensor that requires them. ``grad_check``
verifies any composition against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyGroup, NonDeterministic, NotScalar, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """A dense float array plus the bookkeeping for reverse-mode gradients.

    Public construction validates finiteness; results of recorded operations
    skip that check (training code watches the loss instead). ``grad`` is
    populated by ``backward`` and accumulates across calls until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.data.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    """Internal constructor for op outputs; records the graph edge if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Topological record of every op reaching a root tensor.

    ``run`` seeds the root with gradient one and replays the record in
    reverse, so each op's gradient rule fires exactly once, after all of the
    gradients flowing into its output have accumulated.
    """

    def __init__(self, root: Tensor):
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self.nodes = order  # inputs before the ops that consume them

    def run(self):
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._grad_fn is not None:
                node._grad_fn(node.grad)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None):
    """Accumulate d(loss)/d(t) into t.grad for every tensor reaching loss.

    When ``params`` is given, any parameter the graph never touched gets an
    explicit zero gradient, and the gradients are returned in order.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.data.shape}")
    Tape(loss).run()
    if params is not None:
        grads = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            grads.append(p.grad)
        return grads
    return None


# ------------------------------------------------------------------ plumbing

def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _need_2d(name: str, t: Tensor):
    if t.data.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {t.data.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d("matmul lhs", a)
    _need_2d("matmul rhs", b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def grad_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def grad_fn(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")

    def grad_fn(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), grad_fn)


def scale(x: Tensor, alpha: float) -> Tensor:
    def grad_fn(g):
        _accum(x, alpha * g)

    return _result(alpha * x.data, (x,), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: (m, n) + (n,)."""
    _need_2d("add_bias input", x)
    if b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"bias shape {b.data.shape} does not match columns of {x.data.shape}")

    def grad_fn(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _result(x.data + b.data, (x, b), grad_fn)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"elementwise_mul shapes differ: {a.data.shape} vs {b.data.shape}")

    def grad_fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        _accum(x, g * mask)

    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), grad_fn)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

    def grad_fn(g):
        _accum(x, g * factor)

    return _result(x.data * factor, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def grad_fn(g):
        _accum(x, g * y * (1.0 - y))

    return _result(y, (x,), grad_fn)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped below at ``floor``.

    The clamp keeps cross-entropy finite when a probability underflows; the
    gradient is zero wherever the clamp is active.
    """
    clamped = np.maximum(x.data, floor)
    active = x.data >= floor

    def grad_fn(g):
        _accum(x, np.where(active, g / clamped, 0.0))

    return _result(np.log(clamped), (x,), grad_fn)


def reduce_sum(x: Tensor) -> Tensor:
    def grad_fn(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    def grad_fn(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), grad_fn)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    _need_2d("gather_rows input", x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be 1-D")

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(x, dx)

    return _result(x.data[idx], (x,), grad_fn)


def _segments(groups, n: int, allow_empty: bool) -> np.ndarray:
    """Map flat positions to group ids (-1 = outside every group).

    Groups must be disjoint; overlap would corrupt the mapping.
    """
    seg = np.full(n, -1, dtype=np.intp)
    for gi, idx in enumerate(groups):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            if not allow_empty:
                raise EmptyGroup(f"group {gi} is empty")
            continue
        seg[idx] = gi
    return seg


def masked_softmax(scores: Tensor, groups) -> Tensor:
    """Softmax normalized independently within each group of a 1-D tensor.

    Entries outside every group come out as 0. The per-group maximum is
    subtracted before exponentiation, so uniform score shifts within a group
    change nothing.
    """
    x = scores.data
    if x.ndim != 1:
        raise ShapeError(f"masked_softmax needs a 1-D tensor, got shape {x.shape}")
    ngroups = len(groups)
    seg = _segments(groups, x.size, allow_empty=False)
    inside = seg >= 0
    gmax = np.full(ngroups, -np.inf, dtype=x.dtype)
    np.maximum.at(gmax, seg[inside], x[inside])
    e = np.zeros_like(x)
    e[inside] = np.exp(x[inside] - gmax[seg[inside]])
    tot = np.zeros(ngroups, dtype=x.dtype)
    np.add.at(tot, seg[inside], e[inside])
    y = np.zeros_like(x)
    y[inside] = e[inside] / tot[seg[inside]]

    def grad_fn(g):
        # per group: dx = y * (g - sum(g * y))
        dot = np.zeros(ngroups, dtype=x.dtype)
        np.add.at(dot, seg[inside], (g * y)[inside])
        dx = np.zeros_like(x)
        dx[inside] = y[inside] * (g[inside] - dot[seg[inside]])
        _accum(scores, dx)

    return _result(y, (scores,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    _need_2d("softmax_rows input", x)
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return _result(y, (x,), grad_fn)


def weighted_row_sum(x: Tensor, weights: Tensor, row_indices, groups) -> Tensor:
    """Per-group weighted sums of rows of x.

    Position p contributes weights[p] * x[row_indices[p]] to the row of its
    group. Output has one row per group; groups may be empty and produce
    all-zero rows.
    """
    _need_2d("weighted_row_sum input", x)
    w = weights.data
    if w.ndim != 1:
        raise ShapeError("weighted_row_sum weights must be 1-D")
    rows = np.asarray(row_indices, dtype=np.intp)
    if rows.shape != w.shape:
        raise ShapeError("row_indices length must match weights")
    seg = _segments(groups, w.size, allow_empty=True)
    inside = seg >= 0
    out = np.zeros((len(groups), x.data.shape[1]), dtype=np.result_type(x.data, w))
    np.add.at(out, seg[inside], w[inside, None] * x.data[rows[inside]])

    def grad_fn(g):
        if weights.requires_grad:
            dw = np.zeros_like(w)
            dw[inside] = np.einsum("ij,ij->i", g[seg[inside]], x.data[rows[inside]])
            _accum(weights, dw)
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, rows[inside], w[inside, None] * g[seg[inside]])
            _accum(x, dx)

    return _result(out, (x, weights), grad_fn)


def spmm(m, x: Tensor) -> Tensor:
    """Sparse (constant) matrix times dense tensor: m @ x.

    ``m`` is any COO-style object with rows/cols/dot_dense/t_dot_dense, e.g.
    hypergraph.SparseMatrix. The sparse factor is constant; only x receives
    gradient (dx = m.T @ g).
    """
    _need_2d("spmm input", x)
    if m.cols != x.data.shape[0]:
        raise ShapeError(f"spmm dims differ: {m.rows}x{m.cols} @ {x.data.shape}")

    def grad_fn(g):
        _accum(x, m.t_dot_dense(g).astype(x.data.dtype))

    return _result(m.dot_dense(x.data).astype(x.data.dtype), (x,), grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate``, scale the
    survivors by 1/(1-rate) so expectations match evaluation mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    m = keep.astype(x.data.dtype) / np.asarray(1.0 - rate, dtype=x.data.dtype)

    def grad_fn(g):
        _accum(x, g * m)

    return _result(x.data * m, (x,), grad_fn)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: int
    worst_index: int
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               epsilon: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare taped gradients of a scalar-valued closure against central
    finite differences (f(t+e) - f(t-e)) / 2e, entry by entry.

    The relative error denominator is max(1, |analytic|, |numeric|), so tiny
    gradients are judged absolutely. f must be deterministic; it is evaluated
    twice up front and any discrepancy raises NonDeterministic.
    """
    with no_grad():
        v1 = float(f().data.reshape(()))
        v2 = float(f().data.reshape(()))
    if v1 != v2:
        raise NonDeterministic("function value changed between evaluations")

    for p in params:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise NotScalar("grad_check needs a scalar-valued function")
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    numeric = [np.zeros_like(p.data) for p in params]
    with no_grad():
        for pi, p in enumerate(params):
            for k in range(p.data.size):
                saved = p.data.flat[k]
                p.data.flat[k] = saved + epsilon
                f_plus = float(f().data.reshape(()))
                p.data.flat[k] = saved - epsilon
                f_minus = float(f().data.reshape(()))
                p.data.flat[k] = saved
                numeric[pi].flat[k] = (f_plus - f_minus) / (2.0 * epsilon)

    max_rel = 0.0
    worst = (0, 0)
    for pi, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        rel = np.abs(a - n) / denom
        k = int(np.argmax(rel))
        if rel.reshape(-1)[k] > max_rel:
            max_rel = float(rel.reshape(-1)[k])
            worst = (pi, k)
    return GradCheckReport(
        passed=max_rel <= tolerance,
        max_rel_error=max_rel,
        worst_param=worst[0],
        worst_index=worst[1],
        analytic=analytic,
        numeric=numeric,
    )
