"""Differentiable operations on :class:`~cgr.numerics.tensor.Tensor`.

Broadcasting is limited on purpose: elementwise binary ops accept equal
shapes, a scalar, or a row vector (shape ``(n,)`` or ``(1, n)``) against an
``m x n`` matrix. Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)
    # row vector broadcast over the leading axis
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) == 2 and (small == (big[1],) or small == (1, big[1])):
        return
    raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product (scalar and row-vector operands allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _reduce_to(g * bd, sa) if a.requires_grad else None,
            _reduce_to(g * ad, sb) if b.requires_grad else None,
        )

    return make_result(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    sa, sb = a.shape, b.shape
    return make_result(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, sa), _reduce_to(-g * ad / (bd * bd), sb)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return make_result(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return make_result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(old),))


# -- unary ------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def pow_const(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad**p
    if p == 0:
        return make_result(out, (a,), lambda g: (np.zeros_like(ad),))
    return make_result(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def bw(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return make_result(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return make_result(ad * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def smooth_abs(a: Tensor, eps: float = 1e-12) -> Tensor:
    """|x| with derivative x / sqrt(x^2 + eps), so the slope is defined (zero) at x = 0.

    The forward value is the exact absolute value; only the gradient is smoothed.
    """
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * ad / np.sqrt(ad * ad + eps),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(
        out, (a, b), lambda g: (_reduce_to(g * pick_a, sa), _reduce_to(g * ~pick_a, sb))
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(
        out, (a, b), lambda g: (_reduce_to(g * pick_a, sa), _reduce_to(g * ~pick_a, sb))
    )


# -- reductions -------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    ad = a.data
    if axis is None:
        out = np.asarray(ad.sum(), dtype=DTYPE)
        return make_result(out, (a,), lambda g: (np.broadcast_to(g, ad.shape).copy(),))
    out = ad.sum(axis=axis)
    return make_result(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def rowmax(x: Tensor) -> Tensor:
    """Per-row maximum of an ``n x m`` matrix; gradient to the first argmax."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"rowmax expects an n x m matrix with m >= 1, got {x.shape}")
    xd = x.data
    idx = np.argmax(xd, axis=1)
    rows = np.arange(xd.shape[0])
    out = xd[rows, idx]

    def bw(g):
        gx = np.zeros_like(xd)
        gx[rows, idx] = g
        return (gx,)

    return make_result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


# -- indexing and layout ----------------------------------------------------


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: indices {idx.tolist()} outside [0, {n})")
    xd = x.data
    out = xd[idx]

    def bw(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(out, (x,), bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: feature extents differ, {a.shape} vs {b.shape}")
    m = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return make_result(out, (a, b), lambda g: (g[:m], g[m:]))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        gx[start:stop] = g
        return (gx,)

    return make_result(xd[start:stop].copy(), (x,), bw)


def split_rows(x: Tensor, m: int) -> tuple[Tensor, Tensor]:
    return slice_rows(x, 0, m), slice_rows(x, m, x.shape[0])


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(xd[:, start:stop].copy(), (x,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return make_result(
        out, parts, lambda g: tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(parts)))
    )


def topk_indices(scores: Tensor | np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, descending; ties to the smaller index.

    Not differentiable: the result is a plain list of ints.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=DTYPE)
    s = s.reshape(-1)
    if not 1 <= k <= s.size:
        raise ValueError(f"topk_indices: k={k} must be in [1, {s.size}]")
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


# -- fused blocks -----------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with affine parameters of shape (d,)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    d = xd.shape[-1]

    def bw(g):
        gxhat = g * gd
        gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return (
            gx,
            (g * xhat).reshape(-1, d).sum(0) if gamma.requires_grad else None,
            g.reshape(-1, d).sum(0) if beta.requires_grad else None,
        )

    return make_result(out, (x, gamma, beta), bw)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int = 1, return_weights: bool = False
):
    """softmax(q k^T / sqrt(d_h)) v, optionally split into ``heads`` column blocks.

    With ``heads > 1`` the feature extent is divided evenly and each block
    attends independently; outputs are concatenated column-wise.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("scaled_dot_attention expects matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"scaled_dot_attention: q {q.shape} and k {k.shape} feature extents differ")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"scaled_dot_attention: k {k.shape} and v {v.shape} row counts differ")
    d, dv = q.shape[1], v.shape[1]
    if d % heads or dv % heads:
        raise ShapeError(f"scaled_dot_attention: extents {d}, {dv} not divisible by {heads} heads")
    m, n = q.shape[0], k.shape[0]
    dh, dvh = d // heads, dv // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(m, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(n, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(n, heads, dvh).transpose(1, 0, 2)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    oh = np.matmul(a, vh)
    out = oh.transpose(1, 0, 2).reshape(m, dv)

    def bw(g):
        gh = g.reshape(m, heads, dvh).transpose(1, 0, 2)
        gv = np.matmul(a.transpose(0, 2, 1), gh)
        ga = np.matmul(gh, vh.transpose(0, 2, 1))
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 2, 1), qh)
        return (
            gq.transpose(1, 0, 2).reshape(m, d),
            gk.transpose(1, 0, 2).reshape(n, d),
            gv.transpose(1, 0, 2).reshape(n, dv),
        )

    res = make_result(out, (q, k, v), bw)
    if return_weights:
        return res, a
    return res


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value is exactly ``hard``; the gradient passes to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return make_result(hard.copy(), (soft,), lambda g: (g,))
