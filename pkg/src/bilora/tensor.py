"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records a closure that maps the output gradient to input
gradients. ``backward`` orders the recorded operations topologically and
visits each one once. Only ``requires_grad`` tensors ever hold a ``grad``.

Broadcasting is limited to bias-style addition: in ``add(a, b)`` the shape of
``b`` may be a trailing suffix of the shape of ``a``.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on this thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=DTYPE), shape))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` is ``[..., m, k]``; ``b`` is either a plain ``[k, n]`` matrix or has
    exactly the same leading batch extents as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    batched = b.ndim > 2
    if batched and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if batched:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
            else:
                k, n = b.shape
                a2 = a.data.reshape(-1, k)
                _accumulate(b, a2.T @ g.reshape(-1, n))

    return _result(out, (a, b), grad_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing extents of ``a`` (bias add)."""
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")
    lead = a.ndim - b.ndim

    def grad_fn(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=tuple(range(lead))) if lead else g)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), grad_fn, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        _accumulate(x, g * d)

    return _result(out, (x,), grad_fn, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _result(out, (x, gamma, beta), grad_fn, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), grad_fn, "softmax")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``ids`` of any integer shape gives ``ids.shape + (width,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")

    def grad_fn(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, gt)

    return _result(table.data[ids], (table,), grad_fn, "embedding")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(out, tensors, grad_fn, "concat")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean softmax cross-entropy over rows of ``[n, vocab]`` logits.

    Rows where ``mask`` is false are excluded from both sum and count.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match {n} logit rows")
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy over zero unmasked positions")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = logsum - z[rows, targets]
    loss = float((nll * keep).sum() / count)

    def grad_fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1.0
        p *= (keep / count)[:, None]
        _accumulate(logits, p * g)

    return _result(np.array(loss), (logits,), grad_fn, "cross_entropy")


# ------------------------------------------------------ structural (no math)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def grad_fn(g):
        _accumulate(x, g.reshape(src))

    return _result(x.data.reshape(shape), (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        _accumulate(x, np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), grad_fn, "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[index]

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[index] += g
            _accumulate(x, gx)

    return _result(np.array(out), (x,), grad_fn, "take")


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.array(x.data.sum()), (x,), grad_fn, "sum")


# ------------------------------------------------------------------ backward


@dataclass
class Graph:
    """Recorded operations reachable from a root, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``grad`` on every ``requires_grad`` tensor feeding ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Graph([])
    graph = graph or Graph.trace(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph


def grad_check(f, params, step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` takes no arguments and returns a scalar (Tensor or float) computed
    from ``params``. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")

    def value() -> float:
        out = f()
        v = out.item() if isinstance(out, Tensor) else float(out)
        if not math.isfinite(v):
            raise NumericError(f"grad_check objective is not finite: {v}")
        return v

    for p in params:
        p.grad = None
    out = f()
    if isinstance(out, Tensor):
        if not math.isfinite(out.item()):
            raise NumericError(f"grad_check objective is not finite: {out.item()}")
        backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = value()
                flat[i] = orig - step
                lo = value()
                flat[i] = orig
                numeric = (hi - lo) / (2 * step)
                an = a.reshape(-1)[i]
                worst = max(worst, abs(an - numeric) / max(1.0, abs(an), abs(numeric)))
    return worst
