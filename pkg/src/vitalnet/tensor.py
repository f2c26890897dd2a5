"""Minimal float64 tensor engine with reverse-mode differentiation.

Only the operations the fusion model needs are provided. There is no general
broadcasting: every binary op states the exact shapes it accepts.

Every op output is checked for NaN/Inf and raises :class:`NonFiniteError`.

Backward semantics
------------------
``backward(loss)`` walks the graph that produced ``loss`` once, in reverse
creation order, and *adds* the resulting gradients into ``.grad`` of every
leaf tensor with ``requires_grad=True``. The graph is consumed by the pass:
saved forward values are released and a second ``backward`` on the same loss
raises :class:`GraphConsumedError`. Accumulation across *different* graphs is
intentional (call :func:`zero_grad` between optimizer steps).
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """``backward`` was called on a graph that has already been differentiated."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output_id: int
    backward: Callable | None
    saved: dict = field(default_factory=dict)
    consumed: bool = False


class Tensor:
    """Dense float64 array plus an optional gradient and producing op."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self._record: OpRecord | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar used in tests and small helpers
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward, **saved) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_ids)
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out._record = OpRecord(kind, tuple(inputs), out.id, backward, saved) if out.requires_grad else None
    return out


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------

class Graph:
    """Operation records reachable from a tensor, in topological order.

    Tensor ids are issued from a global counter at creation, so sorting
    records by output id yields an order in which every input precedes its
    consumer.
    """

    def __init__(self, records: list[OpRecord]):
        self.records = records

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: set[int] = set()
        records = []
        stack = [out]
        while stack:
            t = stack.pop()
            rec = t._record
            if rec is None or t.id in seen:
                continue
            seen.add(t.id)
            records.append(rec)
            stack.extend(rec.inputs)
        records.sort(key=lambda r: r.output_id)
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor with requires_grad=True")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    graph = Graph.from_output(loss)
    if any(r.consumed for r in graph.records):
        raise GraphConsumedError("graph already differentiated; rebuild the forward pass")

    grads: dict[int, np.ndarray] = {loss.id: seed}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(graph.records):
        g = grads.pop(rec.output_id, None)
        rec.consumed = True
        if g is None:
            rec.saved = {}
            continue
        in_grads = rec.backward(g, **rec.saved)
        rec.saved = {}
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + ig
            else:
                grads[inp.id] = ig
            if inp.is_leaf:
                leaves[inp.id] = inp
    for leaf_id in sorted(leaves):
        leaf = leaves[leaf_id]
        g = grads[leaf_id]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_check(f: Callable, params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = 16, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences.

    ``f(params)`` must rebuild the forward pass and return a scalar tensor.
    For each parameter up to ``max_coords`` coordinates are sampled (all of
    them when ``max_coords`` is None). The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    The floor keeps near-zero coordinates from turning finite-difference
    roundoff (about 1e-11 at eps=1e-5) into a large ratio; below it the test
    is effectively absolute.
    """
    zero_grad(params)
    backward(f(params))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if max_coords is None or flat.size <= max_coords:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f(params).item()
                flat[i] = orig - eps
                f_minus = f(params).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                ai = a.reshape(-1)[i]
                worst = max(worst, abs(ai - numeric) / max(abs(ai), abs(numeric), floor))
    zero_grad(params)
    return worst


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _matmul_bw(g, a, b):
    return g @ b.T, a.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), _matmul_bw, a=a.data, b=b.data)


def _bmm_bw(g, a, b):
    return g @ b.transpose(0, 2, 1), a.transpose(0, 2, 1) @ g


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of (N, P, K) and (N, K, M) stacks, one matmul per sample."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    return _emit("bmm", a.data @ b.data, (a, b), _bmm_bw, a=a.data, b=b.data)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (2-D or 3-D)."""
    if a.ndim not in (2, 3):
        raise DimensionError(f"transpose expects rank 2 or 3, got {a.shape}")
    axes = (1, 0) if a.ndim == 2 else (0, 2, 1)
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(axes),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum of equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-M vector to every row of an (..., M) tensor."""
    if bias.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias shape {bias.shape} does not match {a.shape}")
    lead = tuple(range(a.ndim - 1))
    return _emit("add_bias", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=lead)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(src, float(g)),))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the gradient at x == 0 is 0."""
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g, mask: (g * mask,), mask=mask)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bw(g, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, with row-max subtraction."""
    if a.ndim < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    y = _softmax(a.data)
    return _emit("softmax", y, (a,), _softmax_bw, y=y)


def gap(f: Tensor) -> Tensor:
    """Global average pooling (N, C, H, W) -> (N, C)."""
    if f.ndim != 4:
        raise DimensionError(f"gap expects a 4-D tensor, got shape {f.shape}")
    n, c, h, w = f.shape
    out = f.data.reshape(n, c, h * w).mean(axis=2)

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _emit("gap", out, (f,), bw)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """[a | b] for (N, C1) and (N, C2)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    return _emit("concat_cols", np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :c1], g[:, c1:]))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    loss = max(loss, 0.0)  # guards against -0.0 / -tiny from rounding at saturation

    def bw(g):
        p = _softmax(logits.data)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _emit("cross_entropy", np.array(loss), (logits,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x (N, Cin, H, W), w (Cout, Cin, kh, kw), b (Cout,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = _kernels.conv_output_size(h, kh, stride, pad)
    wo = _kernels.conv_output_size(wd, kw, stride, pad)
    cols = _kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    x_shape = x.shape
    need_dx = x.requires_grad

    def bw(g, cols, wmat):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0)
        dx = _kernels.col2im(g2 @ wmat, x_shape, kh, kw, stride, pad) if need_dx else None
        return dx, dw, db

    return _emit("conv2d", out, (x, w, b), bw, cols=cols, wmat=wmat)


def embedding_mean(table: Tensor, token_lists: Sequence[Sequence[int]]) -> Tensor:
    """Per-sample mean of embedding rows; an empty token list gives a zero row."""
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    vocab = table.shape[0]
    lengths = [len(t) for t in token_lists]
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    idx = np.fromiter(itertools.chain.from_iterable(token_lists), dtype=np.int64, count=int(offsets[-1]))
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"token ids must lie in [0, {vocab})")
    out = _kernels.bag_mean(table.data, idx, offsets)

    def bw(g):
        return (_kernels.bag_mean_grad(g, idx, offsets, vocab),)

    return _emit("embedding_mean", out, (table,), bw)
