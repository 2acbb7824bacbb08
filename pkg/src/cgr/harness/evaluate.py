"""Held-out evaluation and relevance-threshold calibration."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import EvalRecord, MetricReport, eval_match, evaluate_records
from ..model import CGRModel
from ..scene_synth import IRRELEVANT, RankTable, SceneSample


def predict_records(model: CGRModel, data: Sequence[SceneSample], theta_rel: float | None = None) -> list[EvalRecord]:
    theta = model.theta_rel if theta_rel is None else theta_rel
    records = []
    for scene in data:
        gt_boxes = scene.boxes()
        for task in scene.tasks:
            pred = model.infer(scene, task, theta_rel=theta)
            records.append(
                EvalRecord(scene.scene_id, (task.affordance, task.context), pred, gt_boxes, np.asarray(task.ranks), theta)
            )
    return records


def evaluate(model: CGRModel, data: Sequence[SceneSample], theta_rel: float | None = None) -> MetricReport:
    if not data:
        raise ValueError("evaluation set is empty")
    return evaluate_records(predict_records(model, data, theta_rel))


def calibrate_theta_rel(model: CGRModel, data: Sequence[SceneSample], max_scenes: int = 200) -> float:
    """Pick the rank-score cut that best separates relevant from irrelevant detections.

    Rank scores are only defined up to a shift, so the cut is fitted after
    training: detections matched at IoU >= 0.5 contribute (score, relevant)
    pairs and the threshold maximises the mean of relevant and irrelevant
    accuracy. Returns the midpoint between neighbouring scores.
    """
    scores, labels = [], []
    for scene in data[:max_scenes]:
        gt_boxes = scene.boxes()
        for task in scene.tasks:
            pred = model.infer(scene, task, theta_rel=np.inf)
            m = eval_match(pred.boxes, pred.relevance, gt_boxes)
            for p, g in m.pairs:
                scores.append(pred.rank_scores[p])
                labels.append(task.ranks[g] != IRRELEVANT)
    if not scores:
        return model.theta_rel
    s = np.asarray(scores)
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        return float(s.max() + 1.0) if y.all() else float(s.min() - 1.0)
    uniq = np.unique(s)
    cuts = np.concatenate([[uniq[0] - 1.0], (uniq[1:] + uniq[:-1]) / 2, [uniq[-1] + 1.0]])
    best, best_cut = -1.0, cuts[-1]
    for c in cuts:
        pred_rel = s <= c
        bal = 0.5 * (pred_rel[y].mean() + (~pred_rel[~y]).mean())
        if bal > best + 1e-12:
            best, best_cut = bal, c
    return float(best_cut)


def write_report(report: MetricReport, path: str | Path) -> Path:
    """Write the JSON report plus a per-(scene, task) CSV next to it; returns the CSV path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = path.with_suffix(".rows.csv")
    report.save(path, rows)
    return rows


def _gt_ranks(pred, gt_boxes: np.ndarray) -> np.ndarray:
    """Predicted group rank per ground-truth object; 0 for objects left undetected."""
    out = np.zeros(len(gt_boxes))
    for p, g in eval_match(pred.boxes, pred.relevance, gt_boxes).pairs:
        out[g] = pred.group_rank[p]
    return out


def context_sensitivity(model: CGRModel, data: Sequence[SceneSample], table: RankTable, c0: int = 0, c1: int = 1) -> dict:
    """How often the predicted group ordering changes when only the context word changes.

    Only scenes that contain both categories of a pair whose order the table
    inverts between ``c0`` and ``c1`` are counted. ``changed`` compares the
    per-object predicted ranks; ``flipped`` asks for the stricter event that
    the inverted pair itself swaps order.
    """
    n = changed = flipped = 0
    for scene in data:
        cats = np.asarray(scene.categories())
        for a in range(table.n_affordances):
            pairs = [(x, y) for x, y in table.inverted_pairs(a, c0, c1) if x in cats and y in cats]
            if not pairs:
                continue
            tasks = {t.context: t for t in scene.tasks if t.affordance == a}
            if c0 not in tasks or c1 not in tasks:
                continue
            r0 = _gt_ranks(model.infer(scene, tasks[c0]), scene.boxes())
            r1 = _gt_ranks(model.infer(scene, tasks[c1]), scene.boxes())
            n += 1
            changed += not np.array_equal(r0, r1)
            for x, y in pairs:
                sx, sy = cats == x, cats == y
                if (r0[sx] > 0).all() and (r0[sy] > 0).all() and (r1[sx] > 0).all() and (r1[sy] > 0).all():
                    d0 = r0[sx].mean() - r0[sy].mean()
                    d1 = r1[sx].mean() - r1[sy].mean()
                    if d0 < 0 < d1:
                        flipped += 1
                        break
    if n == 0:
        raise ValueError("no scene contains both categories of an inverted pair")
    return {"n_scenes": n, "changed": changed / n, "flipped": flipped / n}
