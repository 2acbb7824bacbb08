"""Task relation mining: modality enhancement, bidirectional fusion, query selection, group decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    concat_rows,
    gather_rows,
    layer_norm,
    matmul,
    no_grad,
    relu,
    rowmax,
    scaled_dot_attention,
    split_rows,
    topk_indices,
)

Params = dict[str, Tensor]


@dataclass
class FusedFeatures:
    I: Tensor
    T_a: Tensor
    T_c: Tensor


@dataclass
class QuerySet:
    O: Tensor
    G: Tensor
    obj_idx: list[int]
    group_idx: list[int]
    obj_scores: np.ndarray
    group_scores: np.ndarray


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def attention(xq: Tensor, xkv: Tensor, p: Params, prefix: str, heads: int) -> Tensor:
    q = matmul(xq, p[f"{prefix}.wq"])
    k = matmul(xkv, p[f"{prefix}.wk"])
    v = matmul(xkv, p[f"{prefix}.wv"])
    return matmul(scaled_dot_attention(q, k, v, heads=heads), p[f"{prefix}.wo"])


def enhance(F_I: Tensor, F_a: Tensor, F_c: Tensor, p: Params, heads: int = 4):
    """Map each modality to the shared width, then one self-attention + residual per stream.

    Affordance and context token streams are enhanced independently.
    """
    x_img = linear(F_I, p["trm.in_img.w"], p["trm.in_img.b"])
    x_a = linear(F_a, p["trm.in_txt.w"], p["trm.in_txt.b"])
    x_c = linear(F_c, p["trm.in_txt.w"], p["trm.in_txt.b"])
    if not x_img.shape[1] == x_a.shape[1] == x_c.shape[1]:
        raise ShapeError(f"enhance: widths differ {x_img.shape}, {x_a.shape}, {x_c.shape}")
    img = x_img + attention(x_img, x_img, p, "trm.enh_img", heads)
    a = x_a + attention(x_a, x_a, p, "trm.enh_txt", heads)
    c = x_c + attention(x_c, x_c, p, "trm.enh_txt", heads)
    return img, a, c


def bidirectional_fuse(F_I: Tensor, F_a: Tensor, F_c: Tensor, p: Params) -> FusedFeatures:
    """Text-to-image then image-to-text cross-attention.

    Both directions reuse the query projections as keys:
    I = softmax(F_iq F_tq^T / sqrt(d)) F_tv, and the text update uses
    softmax(F_tq F_iq^T / sqrt(d)) F_iv. Residuals are added to each.
    """
    n_a = F_a.shape[0]
    F_T = concat_rows(F_a, F_c)
    F_iq = matmul(F_I, p["trm.fuse.w1"])
    F_iv = matmul(F_I, p["trm.fuse.w2"])
    F_tq = matmul(F_T, p["trm.fuse.w3"])
    F_tv = matmul(F_T, p["trm.fuse.w4"])
    I = F_I + scaled_dot_attention(F_iq, F_tq, F_tv)
    T = F_T + scaled_dot_attention(F_tq, F_iq, F_iv)
    T_a, T_c = split_rows(T, n_a)
    return FusedFeatures(I, T_a, T_c)


def selection_scores(I: Tensor, T: Tensor) -> np.ndarray:
    with no_grad():
        return rowmax(Tensor(I.data) @ Tensor(T.data.T)).data


def selection_logits(I: Tensor, T_a: Tensor, p: Params) -> Tensor:
    """Differentiable per-cell selection logits, a monotone map of the object selection scores.

    Training these against "cell holds an object centre" teaches the fused
    features to put one object query on each object; top-K order is unchanged.
    """
    return rowmax(matmul(I, T_a.T)) * (1.0 / math.sqrt(I.shape[1])) + p["trm.sel.b"]


def select_queries_and_groups(I: Tensor, T_a: Tensor, T_c: Tensor, K_o: int, K_g: int) -> QuerySet:
    n = I.shape[0]
    if K_o > n or K_g > n:
        raise ValueError(f"cannot select K_o={K_o}, K_g={K_g} from {n} image tokens")
    if K_g > K_o:
        raise ValueError(f"K_g={K_g} must not exceed K_o={K_o}")
    s_a = selection_scores(I, T_a)
    s_c = selection_scores(I, T_c)
    idx_o = topk_indices(s_a, K_o)
    idx_g = topk_indices(s_c, K_g)
    return QuerySet(gather_rows(I, idx_o), gather_rows(I, idx_g), idx_o, idx_g, s_a, s_c)


def _norm(x: Tensor, p: Params, name: str) -> Tensor:
    return layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def group_decode(
    O: Tensor, G: Tensor, T_a: Tensor, I: Tensor, p: Params, n_blocks: int, heads: int = 4
) -> tuple[Tensor, Tensor]:
    """Decode object queries and group tokens.

    Per block: joint self-attention over [O, G]; object rows alone attend to the
    affordance tokens; then [O, G] attend to the fused image features; then a
    feed-forward layer. Every stage is pre-norm residual: x + f(LN(x)), so each
    query keeps its own identity in the residual stream; a final layer norm
    bounds the output scale.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    k_o = O.shape[0]
    x = concat_rows(O, G)
    for b in range(n_blocks):
        pre = f"trm.dec{b}"
        h = _norm(x, p, f"{pre}.ln1")
        x = x + attention(h, h, p, f"{pre}.sa", heads)
        o, g = split_rows(x, k_o)
        o = o + attention(_norm(o, p, f"{pre}.ln2"), T_a, p, f"{pre}.ca_t", heads)
        x = concat_rows(o, g)
        x = x + attention(_norm(x, p, f"{pre}.ln3"), I, p, f"{pre}.ca_i", heads)
        h = relu(linear(_norm(x, p, f"{pre}.ln4"), p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]))
        x = x + linear(h, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
    return split_rows(_norm(x, p, "trm.dec_out"), k_o)


RESIDUAL_INIT = 0.1  # attention outputs start small next to their residual stream


def _attn_params(rng, prefix: str, d: int, out: dict) -> None:
    s = 1.0 / math.sqrt(d)
    for w in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{w}"] = rng.standard_normal((d, d)) * s * (RESIDUAL_INIT if w == "wo" else 1.0)


def _ln_params(prefix: str, d: int, out: dict) -> None:
    out[f"{prefix}.g"] = np.ones(d)
    out[f"{prefix}.b"] = np.zeros(d)


def init_params(rng: np.random.Generator, d: int, n_blocks: int, ffn_mult: int = 2) -> dict[str, np.ndarray]:
    s = 1.0 / math.sqrt(d)
    p: dict[str, np.ndarray] = {
        "trm.in_img.w": rng.standard_normal((d, d)) * s,
        "trm.in_img.b": np.zeros(d),
        "trm.in_txt.w": rng.standard_normal((d, d)) * s,
        "trm.in_txt.b": np.zeros(d),
        "trm.sel.b": np.array([-2.0]),
    }
    _attn_params(rng, "trm.enh_img", d, p)
    _attn_params(rng, "trm.enh_txt", d, p)
    for i in range(1, 5):
        # w2 / w4 are the value projections
        p[f"trm.fuse.w{i}"] = rng.standard_normal((d, d)) * s * (RESIDUAL_INIT if i in (2, 4) else 1.0)
    _ln_params("trm.dec_out", d, p)
    for b in range(n_blocks):
        pre = f"trm.dec{b}"
        for stage in ("sa", "ca_t", "ca_i"):
            _attn_params(rng, f"{pre}.{stage}", d, p)
        for ln in ("ln1", "ln2", "ln3", "ln4"):
            _ln_params(f"{pre}.{ln}", d, p)
        p[f"{pre}.ffn.w1"] = rng.standard_normal((d, ffn_mult * d)) * s
        p[f"{pre}.ffn.b1"] = np.zeros(ffn_mult * d)
        p[f"{pre}.ffn.w2"] = rng.standard_normal((ffn_mult * d, d)) / math.sqrt(ffn_mult * d)
        p[f"{pre}.ffn.b2"] = np.zeros(d)
    return p
