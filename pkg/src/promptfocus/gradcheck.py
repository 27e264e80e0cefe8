"""Central finite-difference gradient checks for the tensor operations.

Each registered check builds a scalar loss from fresh random inputs and
exposes the tensors to differentiate.  The numeric side perturbs raw data
in place and replays the forward pass, so the same closure serves both the
analytic and numeric evaluations.  Used by the test suite and by the
``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import RngState
from .tensor import (AttentionParams, MlpParams, Tensor, add, add_bias, affine,
                     backward, broadcast_rows, concat_cols, concat_rows,
                     cross_entropy_logits, expand_cols, gelu, matmul, mean_rows,
                     mlp_forward, mul, multi_head_attention, scale, slice_cols,
                     slice_rows, softmax_rows, sub, sum_all, transpose)

LossBuilder = Callable[[], Tensor]
Wrt = Sequence[tuple[str, Tensor]]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(loss_fn: Callable[[], float], t: Tensor, eps: float = 1e-5,
                 idxs: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. the flat elements of ``t``.

    With ``idxs`` only those flat positions are probed; the rest stay zero
    (pair the result with the analytic gradient at the same positions).
    """
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    positions = range(flat.size) if idxs is None else idxs
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(t.data.shape)


def check_gradients(build: LossBuilder, wrt: Wrt, eps: float = 1e-5,
                    sample: int | None = None, rng: RngState | None = None) -> dict[str, float]:
    """Compare analytic and numeric gradients; returns max rel error per name.

    ``sample`` limits the probed elements per tensor (random positions drawn
    from ``rng``), keeping composite-op checks affordable.
    """
    for _, t in wrt:
        t.zero_grad()
    backward(build())
    loss_value = lambda: build().item()
    errs: dict[str, float] = {}
    for name, t in wrt:
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        if sample is not None and t.data.size > sample:
            if rng is None:
                raise ValueError("sampled check needs an rng")
            idxs = [int(i) for i in rng.choice(t.data.size, sample)]
            num = numeric_grad(loss_value, t, eps, idxs=idxs)
            errs[name] = relative_error(ana.reshape(-1)[idxs], num.reshape(-1)[idxs])
        else:
            errs[name] = relative_error(ana, numeric_grad(loss_value, t, eps))
    return errs


def _weighted(t: Tensor, r: Tensor) -> Tensor:
    return sum_all(mul(t, r))


def _rand(rng: RngState, *shape: int) -> Tensor:
    return Tensor(rng.normal(shape, std=1.0), requires_grad=True)


def _const(rng: RngState, *shape: int) -> Tensor:
    return Tensor(rng.normal(shape, std=1.0))


def _dims(rng: RngState, n: int) -> list[int]:
    return [int(v) for v in rng.integers(2, 9, n)]


def _check_matmul(rng):
    m, k, n = _dims(rng, 3)
    a, b, r = _rand(rng, m, k), _rand(rng, k, n), _const(rng, m, n)
    return lambda: _weighted(matmul(a, b), r), [("a", a), ("b", b)]


def _check_transpose(rng):
    m, n = _dims(rng, 2)
    x, r = _rand(rng, m, n), _const(rng, n, m)
    return lambda: _weighted(transpose(x), r), [("x", x)]


def _check_add(rng):
    m, n = _dims(rng, 2)
    a, b, r = _rand(rng, m, n), _rand(rng, m, n), _const(rng, m, n)
    return lambda: _weighted(add(a, b), r), [("a", a), ("b", b)]


def _check_sub(rng):
    m, n = _dims(rng, 2)
    a, b, r = _rand(rng, m, n), _rand(rng, m, n), _const(rng, m, n)
    return lambda: _weighted(sub(a, b), r), [("a", a), ("b", b)]


def _check_mul(rng):
    m, n = _dims(rng, 2)
    a, b, r = _rand(rng, m, n), _rand(rng, m, n), _const(rng, m, n)
    return lambda: _weighted(mul(a, b), r), [("a", a), ("b", b)]


def _check_scale(rng):
    m, n = _dims(rng, 2)
    x, r = _rand(rng, m, n), _const(rng, m, n)
    return lambda: _weighted(scale(x, -1.7), r), [("x", x)]


def _check_add_bias(rng):
    m, n = _dims(rng, 2)
    x = _rand(rng, m, n)
    b = Tensor(rng.normal((n,), 1.0), requires_grad=True)
    r = _const(rng, m, n)
    return lambda: _weighted(add_bias(x, b), r), [("x", x), ("b", b)]


def _check_affine(rng):
    m, k, n = _dims(rng, 3)
    x, w = _rand(rng, m, k), _rand(rng, k, n)
    b = Tensor(rng.normal((n,), 1.0), requires_grad=True)
    r = _const(rng, m, n)
    return (lambda: _weighted(affine(x, w, b), r),
            [("x", x), ("w", w), ("b", b)])


def _check_softmax_rows(rng):
    m, n = _dims(rng, 2)
    x, r = _rand(rng, m, n), _const(rng, m, n)
    return lambda: _weighted(softmax_rows(x), r), [("x", x)]


def _check_gelu(rng):
    m, n = _dims(rng, 2)
    x, r = _rand(rng, m, n), _const(rng, m, n)
    return lambda: _weighted(gelu(x), r), [("x", x)]


def _check_expand_cols(rng):
    m, w = _dims(rng, 2)
    v = Tensor(rng.normal((m,), 1.0), requires_grad=True)
    r = _const(rng, m, w)
    return lambda: _weighted(expand_cols(v, w), r), [("v", v)]


def _check_slice_cols(rng):
    m, n = _dims(rng, 2)
    start = int(rng.integers(0, n, 1)[0])
    stop = int(rng.integers(start + 1, n + 1, 1)[0])
    x, r = _rand(rng, m, n), _const(rng, m, stop - start)
    return lambda: _weighted(slice_cols(x, start, stop), r), [("x", x)]


def _check_slice_rows(rng):
    m, n = _dims(rng, 2)
    start = int(rng.integers(0, m, 1)[0])
    stop = int(rng.integers(start + 1, m + 1, 1)[0])
    x, r = _rand(rng, m, n), _const(rng, stop - start, n)
    return lambda: _weighted(slice_rows(x, start, stop), r), [("x", x)]


def _check_concat_rows(rng):
    n = _dims(rng, 1)[0]
    parts = [_rand(rng, _dims(rng, 1)[0], n) for _ in range(3)]
    r = _const(rng, sum(p.shape[0] for p in parts), n)
    return (lambda: _weighted(concat_rows(parts), r),
            [(f"p{i}", p) for i, p in enumerate(parts)])


def _check_concat_cols(rng):
    m = _dims(rng, 1)[0]
    parts = [_rand(rng, m, _dims(rng, 1)[0]) for _ in range(3)]
    r = _const(rng, m, sum(p.shape[1] for p in parts))
    return (lambda: _weighted(concat_cols(parts), r),
            [(f"p{i}", p) for i, p in enumerate(parts)])


def _check_mean_rows(rng):
    m, n = _dims(rng, 2)
    x, r = _rand(rng, m, n), _const(rng, 1, n)
    return lambda: _weighted(mean_rows(x), r), [("x", x)]


def _check_broadcast_rows(rng):
    n, reps = _dims(rng, 2)
    row, r = _rand(rng, 1, n), _const(rng, reps, n)
    return lambda: _weighted(broadcast_rows(row, reps), r), [("row", row)]


def _check_sum_all(rng):
    m, n = _dims(rng, 2)
    x = _rand(rng, m, n)
    return lambda: sum_all(x), [("x", x)]


def _check_cross_entropy(rng):
    m, c = _dims(rng, 2)
    logits = _rand(rng, m, c)
    labels = rng.integers(0, c, m)
    return lambda: cross_entropy_logits(logits, labels), [("logits", logits)]


def _check_mlp(rng):
    m, d, o = _dims(rng, 3)
    x = _rand(rng, m, d)
    params = MlpParams.init(d, o, rng, hidden=5)
    r = _const(rng, m, o)
    wrt = [("x", x)] + list(params.tensors())
    return lambda: _weighted(mlp_forward(x, params), r), wrt


def _check_attention(rng):
    heads = int(rng.integers(1, 4, 1)[0])
    d = heads * int(rng.integers(2, 4, 1)[0])
    lq, lk = _dims(rng, 2)
    q, k, v = _rand(rng, lq, d), _rand(rng, lk, d), _rand(rng, lk, d)
    params = AttentionParams.init(d, rng)
    r = _const(rng, lq, d)
    wrt = [("q", q), ("k", k), ("v", v)] + list(params.tensors())
    return lambda: _weighted(multi_head_attention(q, k, v, heads, params), r), wrt


OP_CHECKS: dict[str, Callable[[RngState], tuple[LossBuilder, Wrt]]] = {
    "matmul": _check_matmul,
    "transpose": _check_transpose,
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "scale": _check_scale,
    "add_bias": _check_add_bias,
    "affine": _check_affine,
    "softmax_rows": _check_softmax_rows,
    "gelu": _check_gelu,
    "expand_cols": _check_expand_cols,
    "slice_cols": _check_slice_cols,
    "slice_rows": _check_slice_rows,
    "concat_rows": _check_concat_rows,
    "concat_cols": _check_concat_cols,
    "mean_rows": _check_mean_rows,
    "broadcast_rows": _check_broadcast_rows,
    "sum_all": _check_sum_all,
    "cross_entropy_logits": _check_cross_entropy,
    "mlp_forward": _check_mlp,
    "multi_head_attention": _check_attention,
}

# Composite ops touch many parameters; sample a few elements per tensor so
# a multi-seed sweep stays fast.  None means probe every element.
_SAMPLE_LIMIT = {"mlp_forward": 6, "multi_head_attention": 6}


def run_op_check(name: str, seed: int, eps: float = 1e-5) -> dict[str, float]:
    """Gradient-check one op at one seed; returns max rel error per input."""
    if name not in OP_CHECKS:
        raise KeyError(f"unknown op {name!r}")
    rng = RngState(seed).derive(f"gradcheck/{name}")
    build, wrt = OP_CHECKS[name](rng)
    return check_gradients(build, wrt, eps=eps,
                           sample=_SAMPLE_LIMIT.get(name), rng=rng.derive("sample"))


def run_all_checks(seeds: Iterable[int], eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op across ``seeds``."""
    worst: dict[str, float] = {}
    for name in OP_CHECKS:
        for seed in seeds:
            errs = run_op_check(name, seed, eps=eps)
            peak = max(errs.values())
            if peak > worst.get(name, 0.0):
                worst[name] = peak
    return worst
