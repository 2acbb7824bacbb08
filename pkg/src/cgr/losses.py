"""Set-prediction training objective.

Queries are matched one-to-one to ground-truth objects with an exact
Hungarian solver; matched queries carry box and rank supervision, every query
carries the focal relevance loss. The rank loss is the pairwise group ranking
loss with penalty ``rho`` on equal-rank pairs.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    gather_rows,
    maximum,
    mean,
    minimum,
    mul,
    pow_const,
    reshape,
    sigmoid,
    slice_cols,
    smooth_abs,
    softplus,
    tsum,
)


class RankLossWarning(UserWarning):
    """Rank loss requested with fewer than two matched objects."""


# -- boxes ------------------------------------------------------------------


def _corners(b) -> tuple[float, float, float, float]:
    cx, cy, w, h = (float(v) for v in b)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {tuple(b)}")
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou(a, b) -> float:
    """Generalized IoU of two (cx, cy, w, h) boxes."""
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    encl = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (encl - union) / encl


def giou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    p0, p1 = pred[:, :2] - pred[:, 2:] / 2, pred[:, :2] + pred[:, 2:] / 2
    g0, g1 = gt[:, :2] - gt[:, 2:] / 2, gt[:, :2] + gt[:, 2:] / 2
    inter = np.clip(np.minimum(p1[:, None], g1[None]) - np.maximum(p0[:, None], g0[None]), 0, None).prod(-1)
    union = pred[:, 2:].prod(-1)[:, None] + gt[:, 2:].prod(-1)[None] - inter
    encl = (np.maximum(p1[:, None], g1[None]) - np.minimum(p0[:, None], g0[None])).prod(-1)
    return inter / union - (encl - union) / encl


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted boxes (n x 4 tensor) and fixed targets (n x 4)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    cx, cy, w, h = (slice_cols(pred, i, i + 1) for i in range(4))
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5
    gx0 = Tensor((gt[:, 0] - gt[:, 2] / 2)[:, None])
    gx1 = Tensor((gt[:, 0] + gt[:, 2] / 2)[:, None])
    gy0 = Tensor((gt[:, 1] - gt[:, 3] / 2)[:, None])
    gy1 = Tensor((gt[:, 1] + gt[:, 3] / 2)[:, None])
    iw = maximum(minimum(px1, gx1) - maximum(px0, gx0), 0.0)
    ih = maximum(minimum(py1, gy1) - maximum(py0, gy0), 0.0)
    inter = iw * ih
    union = w * h + Tensor((gt[:, 2] * gt[:, 3])[:, None]) - inter
    encl = (maximum(px1, gx1) - minimum(px0, gx0)) * (maximum(py1, gy1) - minimum(py0, gy0))
    return inter / union - (encl - union) / encl


# -- classification ---------------------------------------------------------


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over queries of -alpha_t (1 - p_t)^gamma log p_t."""
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    sign = 2.0 * t - 1.0
    z = mul(logits, Tensor(sign))  # logit of p_t
    p_t = sigmoid(z)
    nll = softplus(z * -1.0)  # -log p_t
    alpha_t = Tensor(np.where(t > 0, alpha, 1.0 - alpha))
    mod = pow_const(1.0 - p_t, gamma)
    return mean(alpha_t * mod * nll)


# -- matching ---------------------------------------------------------------


def hungarian(cost) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimum-cost assignment of every row of an n x m matrix (n <= m).

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returns ``(rows, cols)`` with ``rows == arange(n)``.
    """
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if n > m:
        raise ValueError(f"hungarian needs rows <= columns, got {C.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return np.arange(n), cols


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query, gt object), sorted by gt index
    unmatched: list[int]
    cost: float

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def objects(self) -> list[int]:
        return [g for _, g in self.pairs]


def match_cost(
    pred_boxes: np.ndarray, pred_logits: np.ndarray, gt_boxes: np.ndarray, w_cls: float = 1.0, w_l1: float = 2.0, w_giou: float = 5.0
) -> np.ndarray:
    """Query x object matching cost: -w_cls p + w_l1 |b - b_gt|_1 + w_giou (1 - GIoU)."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    prob = 1.0 / (1.0 + np.exp(-np.asarray(pred_logits, dtype=np.float64).reshape(-1)))
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    return -w_cls * prob[:, None] + w_l1 * l1 + w_giou * (1.0 - giou_matrix(pred_boxes, gt_boxes))


def match_from_cost(cost: np.ndarray) -> MatchResult:
    cost = np.asarray(cost, dtype=np.float64)
    n_q, n_gt = cost.shape
    if n_q < n_gt:
        raise ValueError(f"need at least as many queries as objects, got {n_q} < {n_gt}")
    gt_idx, q_idx = hungarian(cost.T)
    pairs = [(int(q), int(g)) for q, g in zip(q_idx, gt_idx)]
    used = set(q_idx.tolist())
    total = float(sum(cost[q, g] for q, g in pairs))
    return MatchResult(pairs, [q for q in range(n_q) if q not in used], total)


def hungarian_match(pred_boxes, pred_logits, gt_boxes, w_cls: float = 1.0, w_l1: float = 2.0, w_giou: float = 5.0) -> MatchResult:
    return match_from_cost(match_cost(pred_boxes, pred_logits, gt_boxes, w_cls, w_l1, w_giou))


# -- ranking ----------------------------------------------------------------


def rank_pairs(gt_ranks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All unordered pairs, each ordered so the first member has the larger (worse) gt rank.

    Returns index arrays (i, j) and the pair weights beta *without* rho applied
    to equal-rank pairs (those entries are left at zero).
    """
    r = np.asarray(gt_ranks, dtype=np.float64)
    ii, jj = [], []
    for a, b in itertools.combinations(range(len(r)), 2):
        if r[a] >= r[b]:
            ii.append(a)
            jj.append(b)
        else:
            ii.append(b)
            jj.append(a)
    i, j = np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64)
    diff = r[i] - r[j] if len(i) else np.zeros(0)
    total = diff.sum()
    beta = diff / total if total > 0 else np.zeros_like(diff)
    return i, j, beta


def group_ranking_loss(scores: Tensor, gt_ranks, rho: float = 0.5) -> Tensor:
    """Pairwise logistic ranking loss with equal-rank (grouping) penalty.

    For a pair ordered so r_i^gt >= r_j^gt: d_p = r_j^p - r_i^p; unequal pairs
    use d = d_p and weight (r_i^gt - r_j^gt) / sum over unequal pairs; equal
    pairs use d = |d_p| and weight ``rho``. Loss = sum beta * log(1 + exp(d)).
    """
    gt = np.asarray(gt_ranks, dtype=np.float64).reshape(-1)
    n = gt.size
    if scores.size != n:
        raise ValueError(f"{scores.size} scores for {n} ground-truth ranks")
    if n < 2:
        warnings.warn("rank loss needs at least two matched objects; returning 0", RankLossWarning, stacklevel=2)
        return Tensor(0.0)
    col = scores if scores.ndim == 2 else reshape(scores, (n, 1))
    i, j, beta = rank_pairs(gt)
    equal = gt[i] == gt[j]
    beta = np.where(equal, rho, beta)
    d_p = gather_rows(col, j) - gather_rows(col, i)
    eq = equal.astype(np.float64)[:, None]
    d = d_p * Tensor(1.0 - eq) + smooth_abs(d_p) * Tensor(eq)
    return tsum(softplus(d) * Tensor(beta[:, None]))


# -- total ------------------------------------------------------------------


@dataclass
class LossWeights:
    ce: float = 2.0
    l1: float = 2.0
    giou: float = 5.0
    rank: float = 4.0


@dataclass
class LossBreakdown:
    ce: Tensor
    l1: Tensor
    giou: Tensor
    rank: Tensor
    total: Tensor
    rank_degenerate: bool = False
    sel: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {
            "ce": float(self.ce.data),
            "sel": 0.0 if self.sel is None else float(self.sel.data),
            "l1": float(self.l1.data),
            "giou": float(self.giou.data),
            "rank": float(self.rank.data),
            "total": float(self.total.data),
        }


def total_loss(
    rel_logits: Tensor,
    boxes: Tensor,
    rank_scores: Tensor,
    gt_boxes: np.ndarray,
    gt_ranks,
    match: MatchResult,
    weights: LossWeights | None = None,
    rho: float = 0.5,
    alpha: float = 0.25,
    gamma: float = 2.0,
    sel_logits: Tensor | None = None,
    sel_targets=None,
) -> LossBreakdown:
    """Weighted sum of focal, L1, GIoU and group ranking losses.

    Box and rank terms use matched queries only; the focal term covers every
    query with matched queries as positives. When ``sel_logits`` are given, a
    focal term on the query-selection scores (positives: cells inside a
    ground-truth box) is folded into the classification term; ``sel`` keeps
    that part for logging.
    """
    w = weights or LossWeights()
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_ranks = np.asarray(gt_ranks, dtype=np.float64).reshape(-1)
    q, g = match.queries, match.objects
    targets = np.zeros(rel_logits.shape[0])
    targets[q] = 1.0
    ce = focal_loss(rel_logits, targets.reshape(rel_logits.shape), alpha, gamma)
    if q:
        pb = gather_rows(boxes, q)
        tb = gt_boxes[g]
        l1 = mul(tsum(smooth_abs(pb - Tensor(tb))), 1.0 / len(q))
        gi = mean(1.0 - giou_tensor(pb, tb))
    else:
        l1, gi = Tensor(0.0), Tensor(0.0)
    degenerate = len(q) < 2
    if degenerate:
        rank = Tensor(0.0)
    else:
        rank = group_ranking_loss(gather_rows(rank_scores, q), gt_ranks[g], rho)
    sel = None
    if sel_logits is not None:
        st = np.asarray(sel_targets, dtype=np.float64).reshape(sel_logits.shape)
        # proposal-style normalisation: summed over cells, per ground-truth object
        scale = st.size / max(float(st.sum()), 1.0)
        sel = focal_loss(sel_logits, st, alpha, gamma) * scale
        ce = ce + sel
    # zero-weight terms stay out of the graph entirely
    total = Tensor(0.0)
    for term, lam in ((ce, w.ce), (l1, w.l1), (gi, w.giou), (rank, w.rank)):
        if lam:
            total = total + term * lam
    return LossBreakdown(ce, l1, gi, rank, total, degenerate, sel)


def center_cells(H: int, W: int, gt_boxes) -> np.ndarray:
    """(H*W,) targets: 1.0 for each cell containing a ground-truth box centre."""
    b = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    t = np.zeros(H * W)
    col = np.clip((b[:, 0] * W).astype(int), 0, W - 1)
    row = np.clip((b[:, 1] * H).astype(int), 0, H - 1)
    t[row * W + col] = 1.0
    return t
