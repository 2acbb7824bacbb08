"""Graph group update: Gumbel grouping, group aggregation, context-conditioned
message passing, prediction heads and inference post-processing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    straight_through,
)
from .trm import linear

Params = dict[str, Tensor]


@dataclass
class GroupAssignment:
    soft: Tensor  # K_o x K_g probabilities
    hard: np.ndarray  # per-object group index
    routing: Tensor  # one-hot values; carries soft gradients when straight-through
    logits: Tensor
    straight_through: bool = True

    @property
    def one_hot(self) -> np.ndarray:
        return self.routing.data


@dataclass
class GroupedFeatures:
    theta: Tensor
    phi: Tensor
    sizes: np.ndarray


def sample_gumbel(rng: np.random.Generator, shape: tuple[int, int], shared: bool = False) -> np.ndarray:
    """Gumbel(0, 1) draws, i.i.d. per (object, group) or one per group column when ``shared``."""
    if shared:
        u = rng.random((1, shape[1]))
        u = np.repeat(u, shape[0], axis=0)
    else:
        u = rng.random(shape)
    u = np.clip(u, 1e-20, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_group(
    O: Tensor,
    G: Tensor,
    tau: float,
    rng: np.random.Generator | None,
    p: Params,
    train: bool = False,
    straight: bool = True,
    shared_noise: bool = False,
    center: bool = False,
) -> GroupAssignment:
    """Assign each object query to a group token.

    logits[i, j] = (O_i W^o) . (G_j W^g); the soft assignment is a softmax over
    groups of (logits + noise) / tau, noise being Gumbel in training and zero
    in evaluation. The hard assignment is the row argmax (first on ties).

    With ``center`` the object features are centred over the query set first,
    which removes any per-group offset shared by every object (that offset
    cannot separate objects and otherwise drifts until one group wins all).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if center:
        O = O - reshape(mean(O, axis=0), (1, O.shape[1]))
    logits = matmul(matmul(O, p["ggu.wo"]), matmul(G, p["ggu.wg"]).T)
    z = logits
    if train:
        if rng is None:
            raise ValueError("training-mode grouping needs an rng")
        z = z + Tensor(sample_gumbel(rng, logits.shape, shared_noise))
    soft = softmax(z * (1.0 / tau), axis=1)
    hard = np.argmax(soft.data, axis=1)
    one_hot = np.zeros_like(soft.data)
    one_hot[np.arange(len(hard)), hard] = 1.0
    routing = straight_through(one_hot, soft) if straight else Tensor(one_hot)
    return GroupAssignment(soft, hard, routing, logits, straight)


def aggregate(O: Tensor, assignment: GroupAssignment) -> GroupedFeatures:
    """Group embedding = mean of member rows (zero for empty groups); theta_i = O_i + phi[group(i)]."""
    H = assignment.routing
    sizes = assignment.one_hot.sum(axis=0)
    inv = np.diag(1.0 / np.maximum(sizes, 1.0))
    phi = matmul(Tensor(inv), matmul(H.T, O))
    theta = O + matmul(H, phi)
    return GroupedFeatures(theta, phi, sizes)


def graph_update(theta: Tensor, T_c: Tensor, p: Params) -> Tensor:
    """Fully connected message passing conditioned on the pooled context vector.

    scores[j, i] = ((theta_j W5) * (t_c W6)) . (theta_i W7); weights are a
    softmax over senders j; theta_r = theta + (sum_j w_ji theta_j W8) W9.
    """
    d = T_c.shape[1]
    t_c = reshape(mean(T_c, axis=0), (1, d))
    gate = matmul(t_c, p["ggu.w6"])
    send = mul(matmul(theta, p["ggu.w5"]), gate)
    recv = matmul(theta, p["ggu.w7"])
    w = softmax(matmul(send, recv.T), axis=0)
    messages = matmul(w.T, matmul(theta, p["ggu.w8"]))
    return theta + matmul(messages, p["ggu.w9"])


def _logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 1e-6, 1 - 1e-6)
    return np.log(x / (1 - x))


def heads(O: Tensor, theta_r: Tensor, ref_xy: np.ndarray, p: Params) -> tuple[Tensor, Tensor, Tensor]:
    """Relevance logits (K_o x 1), boxes (K_o x 4, cx cy w h in [0,1]) and rank scores (K_o x 1).

    Box centres are regressed as offsets in logit space from the source cell
    centre ``ref_xy``; sizes are free sigmoids.
    """
    rel = linear(O, p["head.cls.w"], p["head.cls.b"])
    h = relu(linear(O, p["head.box.w1"], p["head.box.b1"]))
    h = relu(linear(h, p["head.box.w2"], p["head.box.b2"]))
    delta = linear(h, p["head.box.w3"], p["head.box.b3"])
    ref = np.zeros((O.shape[0], 4))
    ref[:, :2] = _logit(ref_xy)
    boxes = sigmoid(delta + Tensor(ref))
    rank = linear(theta_r, p["head.rank.w"], p["head.rank.b"])
    return rel, boxes, rank


GROUP_INIT = 0.3


def init_params(rng: np.random.Generator, d: int, init_size: float = 0.16) -> dict[str, np.ndarray]:
    s = 1.0 / math.sqrt(d)
    p = {f"ggu.w{k}": rng.standard_normal((d, d)) * s for k in ("5", "6", "7", "8")}
    # grouping logits start near the Gumbel noise scale so the soft path is not saturated
    for k in ("o", "g"):
        p[f"ggu.w{k}"] = rng.standard_normal((d, d)) * s * GROUP_INIT
    p["ggu.w9"] = rng.standard_normal((d, d)) * s * 0.5
    p["head.cls.w"] = rng.standard_normal((d, 1)) * s
    p["head.cls.b"] = np.array([-2.0])
    p["head.box.w1"] = rng.standard_normal((d, d)) * s
    p["head.box.b1"] = np.zeros(d)
    p["head.box.w2"] = rng.standard_normal((d, d)) * s
    p["head.box.b2"] = np.zeros(d)
    p["head.box.w3"] = rng.standard_normal((d, 4)) * s * 0.1
    p["head.box.b3"] = np.array([0.0, 0.0, _logit(np.array(init_size)), _logit(np.array(init_size))])
    p["head.rank.w"] = rng.standard_normal((d, 1)) * s
    p["head.rank.b"] = np.zeros(1)
    return p


# -- inference post-processing ----------------------------------------------


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    inter = np.clip(hi - lo, 0, None).prod(-1)
    union = a[:, 2:].prod(-1)[:, None] + b[:, 2:].prod(-1)[None] - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = 0.7) -> list[int]:
    """Greedy suppression; returns kept positions in descending score order."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep: list[int] = []
    iou = box_iou_matrix(boxes, boxes)
    for i in order:
        if all(iou[i, j] < iou_thr for j in keep):
            keep.append(int(i))
    return keep


def group_ranks(groups: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Rank groups 1..m by ascending mean rank score; returns per-item rank and group order."""
    groups = np.asarray(groups)
    scores = np.asarray(scores, dtype=np.float64)
    uniq = sorted(set(int(g) for g in groups))
    means = {g: float(scores[groups == g].mean()) for g in uniq}
    order = sorted(uniq, key=lambda g: (means[g], g))
    level = {g: r + 1 for r, g in enumerate(order)}
    return np.array([level[int(g)] for g in groups], dtype=np.int64), order


@dataclass
class Prediction:
    boxes: np.ndarray  # n x 4
    relevance: np.ndarray  # n, probabilities
    rank_scores: np.ndarray  # n, lower = higher priority
    groups: np.ndarray  # n, group index
    group_rank: np.ndarray  # n, 1 = highest-priority group
    irrelevant: np.ndarray  # n, bool
    query_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    group_order: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.relevance)

    @classmethod
    def empty(cls) -> "Prediction":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 4)), z, z, zi, zi, np.zeros(0, dtype=bool), zi, [])


def postprocess(
    rel_logits: np.ndarray,
    boxes: np.ndarray,
    rank_scores: np.ndarray,
    groups: np.ndarray,
    det_thresh: float,
    theta_rel: float,
    nms_iou: float = 0.7,
) -> Prediction:
    prob = 1.0 / (1.0 + np.exp(-np.asarray(rel_logits, dtype=np.float64).reshape(-1)))
    scores = np.asarray(rank_scores, dtype=np.float64).reshape(-1)
    idx = np.flatnonzero(prob >= det_thresh)
    if idx.size == 0:
        return Prediction.empty()
    keep = idx[nms(boxes[idx], prob[idx], nms_iou)]
    g = np.asarray(groups)[keep]
    levels, order = group_ranks(g, scores[keep])
    return Prediction(
        boxes=np.asarray(boxes)[keep],
        relevance=prob[keep],
        rank_scores=scores[keep],
        groups=g,
        group_rank=levels,
        irrelevant=scores[keep] > theta_rel,
        query_index=keep.astype(np.int64),
        group_order=order,
    )


def infer(scene, task, model, theta_rel: float | None = None, det_thresh: float | None = None) -> Prediction:
    """Evaluation-mode forward pass (no Gumbel noise) followed by thresholding, NMS and group ranking."""
    with no_grad():
        out = model.forward(scene, task, train=False)
    cfg = model.cfg
    return postprocess(
        out.rel_logits.data,
        out.boxes.data,
        out.rank_scores.data,
        out.assignment.hard,
        cfg.det_thresh if det_thresh is None else det_thresh,
        model.theta_rel if theta_rel is None else theta_rel,
        cfg.nms_iou,
    )
