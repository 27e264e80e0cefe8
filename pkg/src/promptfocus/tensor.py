"""Dense float64 tensors with a recorded-tape reverse-mode autodiff.

The graph is rebuilt on every forward pass: each operation that sees a
grad-requiring input attaches a node holding the parent tensors and one
vector-Jacobian closure per parent.  ``backward`` walks the nodes once in
reverse topological order and then marks them consumed, so a second call
without a fresh forward raises.  Only the handful of operations the
prompt-focuser and toy head need are provided; there is no broadcasting
beyond the dedicated expand/bias/broadcast ops.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, DimensionError, StateError
from .rng import RngState

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _all_finite(arr: np.ndarray) -> bool:
    # single-pass fast path: a finite sum proves every entry finite; a
    # non-finite sum is either a real nan/inf or an overflow of huge finite
    # values, so only then pay for the exact min/max check
    if arr.size == 0:
        return True
    with np.errstate(over="ignore", invalid="ignore"):
        if math.isfinite(float(arr.sum())):
            return True
    return math.isfinite(float(arr.min())) and math.isfinite(float(arr.max()))


class _Node:
    __slots__ = ("parents", "vjps", "consumed")

    def __init__(self, parents, vjps):
        self.parents = parents
        self.vjps = vjps
        self.consumed = False


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise ContractError("tensor values must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_EAGER_FINITE_CHECKS = True


@contextmanager
def deferred_finite_checks():
    """Skip the per-operation finiteness check inside this block.

    Training loops validate the scalar loss each step instead, which sees
    any nan or infinity produced during that step's forward pass; per-op
    checks stay on everywhere else for precise error locations.
    """
    global _EAGER_FINITE_CHECKS
    prev = _EAGER_FINITE_CHECKS
    _EAGER_FINITE_CHECKS = False
    try:
        yield
    finally:
        _EAGER_FINITE_CHECKS = prev


def _out(data: np.ndarray, parents: Sequence[Tensor], vjps) -> Tensor:
    """Wrap an op result, recording a node when any parent needs grad."""
    if _EAGER_FINITE_CHECKS and not _all_finite(data):
        raise ContractError("operation produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = any(p.requires_grad for p in parents)
    t._node = _Node(list(parents), list(vjps)) if t.requires_grad else None
    return t


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``.

    The loss must be a scalar produced by recorded operations.  The walked
    graph is consumed: calling backward again without a fresh forward pass
    raises ``StateError``.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss was not produced by a recorded operation graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, emitted = stack.pop()
        if emitted:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise StateError("graph already consumed by a previous backward; rerun the forward pass")
        for p, vjp in zip(node.parents, node.vjps):
            if not p.requires_grad:
                continue
            pg = vjp(g)
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        node.consumed = True
        node.vjps = None


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _out(ad @ bd, (a, b), (lambda g: g @ bd.T, lambda g: ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return _out(x.data.T.copy(), (x,), (lambda g: g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _out(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _out(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), (lambda g: g * bd, lambda g: g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _out(x.data * c, (x,), (lambda g: g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias vector to every row of an L x d matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias shapes incompatible: {x.shape} + {b.shape}")
    return _out(x.data + b.data[None, :], (x, b), (lambda g: g, lambda g: g.sum(axis=0)))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b as a single recorded operation (one node per linear layer)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine shapes incompatible: {x.shape} x {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise DimensionError(f"affine bias {b.shape} does not match output width {w.shape[1]}")
    xd, wd = x.data, w.data
    return _out(xd @ wd + b.data[None, :], (x, w, b),
                (lambda g: g @ wd.T, lambda g: xd.T @ g, lambda g: g.sum(axis=0)))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _out(y, (x,), (vjp,))


def _gelu_grad(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    # cdf is the erf factor already computed by the forward pass
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    return _out(xd * cdf, (x,), (lambda g: g * _gelu_grad(xd, cdf),))


def expand_cols(v: Tensor, width: int) -> Tensor:
    """Replicate a length-K vector into a K x width matrix."""
    if v.data.ndim != 1:
        raise DimensionError(f"expand_cols needs a vector, got shape {v.shape}")
    out = np.repeat(v.data[:, None], width, axis=1)
    return _out(out, (v,), (lambda g: g.sum(axis=1),))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] invalid for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return full

    return _out(x.data[:, start:stop].copy(), (x,), (vjp,))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] invalid for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return full

    return _out(x.data[start:stop].copy(), (x,), (vjp,))


def _concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one part")
    extents = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + extents)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            return lambda g: g[lo:hi, :]
        return lambda g: g[:, lo:hi]

    out = np.concatenate([p.data for p in parts], axis=axis)
    return _out(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices along the sequence (row) axis."""
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows widths differ: {[p.shape for p in parts]}")
    return _concat(parts, axis=0)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols heights differ: {[p.shape for p in parts]}")
    return _concat(parts, axis=1)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows, kept as a 1 x d matrix."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a matrix, got shape {x.shape}")
    n = x.shape[0]
    return _out(x.data.mean(axis=0, keepdims=True), (x,), (lambda g: np.repeat(g, n, axis=0) / n,))


def broadcast_rows(row: Tensor, n: int) -> Tensor:
    """Replicate a 1 x d matrix into n identical rows."""
    if row.data.ndim != 2 or row.shape[0] != 1:
        raise DimensionError(f"broadcast_rows needs a 1 x d matrix, got shape {row.shape}")
    return _out(np.repeat(row.data, n, axis=0), (row,), (lambda g: g.sum(axis=0, keepdims=True),))


def sum_all(x: Tensor) -> Tensor:
    return _out(np.asarray(x.data.sum()), (x,), (lambda g: np.broadcast_to(g, x.shape).copy(),))


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise class logits against integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs a logits matrix, got shape {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError("label id outside logit columns")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return d * (float(g) / n)

    return _out(np.asarray(loss), (logits,), (vjp,))


# ---------------------------------------------------------------------------
# parameter containers and composite operations


@dataclass
class MlpParams:
    """Linear -> GELU -> Linear."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: RngState,
             hidden: int | None = None, zero_last: bool = False) -> "MlpParams":
        h = 4 * d_in if hidden is None else hidden
        w1 = Tensor(rng.normal((d_in, h), std=1.0 / math.sqrt(d_in)), requires_grad=True)
        b1 = Tensor(np.zeros(h), requires_grad=True)
        if zero_last:
            w2 = Tensor(np.zeros((h, d_out)), requires_grad=True)
        else:
            w2 = Tensor(rng.normal((h, d_out), std=1.0 / math.sqrt(h)), requires_grad=True)
        b2 = Tensor(np.zeros(d_out), requires_grad=True)
        return cls(w1, b1, w2, b2)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class AttentionParams:
    """Q/K/V/output projection weights and biases for one attention stage."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, d: int, rng: RngState,
             identity_gain: float | None = None) -> "AttentionParams":
        if identity_gain is None:
            std = 1.0 / math.sqrt(d)
            draw = lambda: rng.normal((d, d), std=std)
            wq, wk, wv, wo = draw(), draw(), draw(), draw()
        else:
            # near-pass-through start: scaled-identity queries/keys give a
            # sharply diagonal softmax, identity value/output keep content,
            # small noise breaks symmetry (same draw count as random init)
            draw = lambda: rng.normal((d, d), std=0.02)
            eye = np.eye(d)
            wq = identity_gain * eye + draw()
            wk = identity_gain * eye + draw()
            wv = eye + draw()
            wo = eye + draw()
        t = lambda a: Tensor(a, requires_grad=True)
        zb = lambda: Tensor(np.zeros(d), requires_grad=True)
        return cls(t(wq), zb(), t(wk), zb(), t(wv), zb(), t(wo), zb())

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("wq", self.wq), ("bq", self.bq), ("wk", self.wk), ("bk", self.bk),
                ("wv", self.wv), ("bv", self.bv), ("wo", self.wo), ("bo", self.bo)]


def mlp_forward(x: Tensor, params: MlpParams) -> Tensor:
    """Two affine layers with GELU between them."""
    if x.data.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ConfigurationError(
            f"mlp input width {x.shape} does not match w1 {params.w1.shape}")
    if params.w1.shape[1] != params.w2.shape[0]:
        raise ConfigurationError(
            f"mlp hidden widths disagree: {params.w1.shape} vs {params.w2.shape}")
    h = gelu(affine(x, params.w1, params.b1))
    return affine(h, params.w2, params.b2)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: AttentionParams, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` column blocks.

    Queries, keys and values are projected, split head-wise along columns,
    attended with scale 1/sqrt(d_k), concatenated and output-projected.
    With ``return_weights`` the per-head attention probability matrices are
    returned alongside the output (as plain arrays, for inspection).
    """
    d = q.shape[1]
    if d % heads != 0:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    if k.shape[1] != d or v.shape[1] != d:
        raise DimensionError(f"q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    dk = d // heads
    qp = affine(q, params.wq, params.bq)
    kp = affine(k, params.wk, params.bk)
    vp = affine(v, params.wv, params.bv)
    contexts = []
    weights = []
    for h in range(heads):
        if heads == 1:
            qh, kh, vh = qp, kp, vp  # full-width slices would be copies
        else:
            lo, hi = h * dk, (h + 1) * dk
            qh, kh, vh = (slice_cols(qp, lo, hi), slice_cols(kp, lo, hi),
                          slice_cols(vp, lo, hi))
        probs = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dk)))
        if return_weights:
            weights.append(probs.data.copy())
        contexts.append(matmul(probs, vh))
    merged = contexts[0] if heads == 1 else concat_cols(contexts)
    out = affine(merged, params.wo, params.bo)
    return (out, weights) if return_weights else out
