"""Ranking, detection, grouping and relevance metrics.

Per-image quantities are computed on the greedy IoU >= 0.5 matching between
retained predictions and ground-truth objects. Images on which a metric is
undefined (too few matches, zero variance) are skipped and counted.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .ggu import Prediction, box_iou_matrix, group_ranks
from .scene_synth import IRRELEVANT


@dataclass
class EvalMatch:
    pairs: list[tuple[int, int]]  # (prediction index, gt index)
    unmatched_gt: list[int]
    unmatched_pred: list[int]

    @property
    def pred_idx(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_idx(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def eval_match(pred_boxes, pred_scores, gt_boxes, iou_thr: float = 0.5) -> EvalMatch:
    """Greedy matching by descending prediction score to the best still-free gt box."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_p, n_g = len(pred_boxes), len(gt_boxes)
    if n_p == 0 or n_g == 0:
        return EvalMatch([], list(range(n_g)), list(range(n_p)))
    iou = box_iou_matrix(pred_boxes, gt_boxes)
    free = np.ones(n_g, dtype=bool)
    pairs, unmatched_pred = [], []
    for i in np.argsort(-np.asarray(pred_scores, dtype=np.float64), kind="stable"):
        cand = np.where(free, iou[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            free[j] = False
            pairs.append((int(i), j))
        else:
            unmatched_pred.append(int(i))
    return EvalMatch(pairs, [int(j) for j in np.flatnonzero(free)], sorted(unmatched_pred))


# -- per-image primitives ---------------------------------------------------


def spearman(x, y) -> float | None:
    """Spearman correlation with average ranks for ties; None when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return pearson(rankdata(x), rankdata(y))


def pearson(x, y) -> float | None:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if den == 0:
        return None
    return float(np.clip((xc * yc).sum() / den, -1.0, 1.0))


def ssor_image(pred_ranks, gt_levels) -> float | None:
    rho = spearman(pred_ranks, gt_levels)
    return None if rho is None else (rho + 1.0) / 2.0


def dense_rank(values) -> np.ndarray:
    """1-based dense rank (equal values share a rank, no gaps)."""
    values = np.asarray(values)
    uniq = np.unique(values)
    return np.searchsorted(uniq, values) + 1


def sa_sor_image(gt_levels, pred_rank_for_gt) -> float | None:
    """Pearson correlation of salience-style values over relevant gt objects.

    ``gt_levels`` are the levels of the relevant gt objects (1 = best);
    ``pred_rank_for_gt`` holds the matched prediction's group rank or 0 for a
    miss. Both are flipped so larger means more important; misses stay 0.
    """
    gt = dense_rank(gt_levels)
    s_gt = gt.max() + 1 - gt
    pr = np.asarray(pred_rank_for_gt, dtype=np.float64)
    hit = pr > 0
    s_pred = np.zeros_like(pr)
    if hit.any():
        s_pred[hit] = pr[hit].max() + 1 - pr[hit]
    return pearson(s_gt, s_pred)


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table.

    Identical partitions score 1, including the degenerate cases where the
    chance-corrected denominator vanishes.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("partitions must label the same items")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return (x * (x - 1) / 2.0).sum()

    index = comb2(table)
    sa, sb = comb2(table.sum(1)), comb2(table.sum(0))
    total = n * (n - 1) / 2.0
    expected = sa * sb / total
    max_index = (sa + sb) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def average_precision(scores, is_tp, n_gt: int) -> float:
    """101-point interpolated AP of a ranked detection list."""
    if n_gt == 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp, cfp = np.cumsum(tp), np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # precision envelope, then sample at recall thresholds 0, 0.01, ..., 1
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    thresholds = np.linspace(0.0, 1.0, 101)
    pos = np.searchsorted(recall, thresholds, side="left")
    sampled = np.where(pos < len(recall), envelope[np.minimum(pos, len(recall) - 1)], 0.0)
    return float(sampled.mean())


# -- split-level aggregation ------------------------------------------------


@dataclass
class EvalRecord:
    scene_id: str
    task: tuple[int, int]
    prediction: Prediction
    gt_boxes: np.ndarray
    gt_levels: np.ndarray  # 1..7, or 8 for irrelevant
    theta_rel: float = 7.5


@dataclass
class MetricReport:
    ssor: float | None
    sa_sor: float | None
    map50: float | None
    ari: float | None
    task_acc: float | None
    task_recall: float | None
    n_pairs: int
    skipped: dict[str, int]
    per_task: dict[str, dict[str, float | None]] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    AGGREGATES = ("ssor", "sa_sor", "map50", "ari", "task_acc", "task_recall")

    def aggregates(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in self.AGGREGATES}

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("rows")
        return out

    def save(self, path: str | Path, rows_csv: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.to_json()), indent=2, sort_keys=True))
        if rows_csv is not None:
            write_rows_csv(self.rows, rows_csv)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


ROW_FIELDS = ("scene_id", "affordance", "context", "n_gt", "n_pred", "n_matched", "ssor", "sa_sor", "ari", "task_acc", "task_recall")


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in ROW_FIELDS})


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None


def image_metrics(rec: EvalRecord) -> tuple[dict, EvalMatch]:
    pred = rec.prediction
    levels = np.asarray(rec.gt_levels)
    m = eval_match(pred.boxes, pred.relevance, rec.gt_boxes)
    pi, gi = m.pred_idx, m.gt_idx
    row: dict = {
        "scene_id": rec.scene_id,
        "affordance": rec.task[0],
        "context": rec.task[1],
        "n_gt": int(len(levels)),
        "n_pred": int(len(pred)),
        "n_matched": int(len(pi)),
    }
    row["ssor"] = ssor_image(pred.group_rank[pi], levels[gi]) if len(pi) >= 2 else None

    relevant = np.flatnonzero(levels != IRRELEVANT)
    if len(relevant) >= 2:
        hit_rank = {g: pred.group_rank[p] for p, g in m.pairs}
        pr = [float(hit_rank.get(int(g), 0.0)) for g in relevant]
        row["sa_sor"] = sa_sor_image(levels[relevant], pr)
    else:
        row["sa_sor"] = None

    row["ari"] = ari(pred.groups[pi], levels[gi]) if len(pi) >= 2 else None

    pred_rel = pred.rank_scores[pi] <= rec.theta_rel if len(pi) else np.zeros(0, dtype=bool)
    gt_rel = levels[gi] != IRRELEVANT if len(pi) else np.zeros(0, dtype=bool)
    row["task_acc"] = float((pred_rel == gt_rel).mean()) if len(pi) else None
    n_rel = int((levels != IRRELEVANT).sum())
    row["task_recall"] = float((pred_rel & gt_rel).sum() / n_rel) if n_rel else None
    return row, m


def evaluate_records(records: Sequence[EvalRecord]) -> MetricReport:
    rows = []
    det_by_task: dict[tuple[int, int], dict] = defaultdict(lambda: {"scores": [], "tp": [], "n_gt": 0})
    for rec in sorted(records, key=lambda r: (r.scene_id, r.task)):
        row, m = image_metrics(rec)
        rows.append(row)
        bucket = det_by_task[rec.task]
        tp = np.zeros(len(rec.prediction), dtype=bool)
        tp[m.pred_idx] = True
        bucket["scores"].extend(rec.prediction.relevance.tolist())
        bucket["tp"].extend(tp.tolist())
        bucket["n_gt"] += len(rec.gt_levels)

    skipped = {k: sum(r[k] is None for r in rows) for k in ("ssor", "sa_sor", "ari", "task_acc", "task_recall")}
    per_task = {}
    aps = []
    for task in sorted(det_by_task):
        b = det_by_task[task]
        ap = average_precision(b["scores"], b["tp"], b["n_gt"])
        aps.append(ap)
        trows = [r for r in rows if (r["affordance"], r["context"]) == task]
        per_task[f"{task[0]}:{task[1]}"] = {
            "map50": ap,
            **{k: _mean(r[k] for r in trows) for k in ("ssor", "sa_sor", "ari", "task_acc", "task_recall")},
            "n_pairs": len(trows),
        }
    return MetricReport(
        ssor=_mean(r["ssor"] for r in rows),
        sa_sor=_mean(r["sa_sor"] for r in rows),
        map50=_mean(aps),
        ari=_mean(r["ari"] for r in rows),
        task_acc=_mean(r["task_acc"] for r in rows),
        task_recall=_mean(r["task_recall"] for r in rows),
        n_pairs=len(rows),
        skipped=skipped,
        per_task=per_task,
        rows=rows,
    )


def ground_truth_prediction(gt_boxes, gt_levels) -> Prediction:
    """Replay ground truth as a prediction: exact boxes, full confidence, levels as scores and groups."""
    levels = np.asarray(gt_levels, dtype=np.int64)
    ranks, order = group_ranks(levels, levels.astype(np.float64))
    return Prediction(
        boxes=np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4).copy(),
        relevance=np.ones(len(levels)),
        rank_scores=levels.astype(np.float64),
        groups=levels.copy(),
        group_rank=ranks,
        irrelevant=levels == IRRELEVANT,
        query_index=np.arange(len(levels)),
        group_order=order,
    )
