"""Sweep the equal-rank weight of the group ranking loss."""

from __future__ import annotations

from typing import Sequence

from ..config import RunConfig
from ..scene_synth import SceneSample, load_dataset
from .evaluate import evaluate
from .train import train


def ablate_rho(
    cfg: RunConfig,
    values: Sequence[float],
    train_data: Sequence[SceneSample] | None = None,
    val_data: Sequence[SceneSample] | None = None,
) -> list[dict]:
    """Train one model per rho with everything else fixed; one metrics row per value."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError(f"need at least two rho values to compare, got {values}")
    if any(v < 0 for v in values):
        raise ValueError(f"rho must be non-negative, got {values}")
    train_data = train_data if train_data is not None else load_dataset(cfg.train_data)
    val_data = val_data if val_data is not None else load_dataset(cfg.val_data)
    rows = []
    for rho in values:
        run = cfg.replace(rho=rho)
        result = train(run, data=train_data)
        report = evaluate(result.model, val_data)
        rows.append({"rho": rho, "seed": cfg.seed, "theta_rel": result.model.theta_rel, **report.aggregates()})
    return rows
