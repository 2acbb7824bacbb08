"""Static figures for training traces, metric reports and rho sweeps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("ce", "sel", "l1", "giou", "rank", "total")
METRIC_KEYS = ("ssor", "sa_sor", "map50", "ari", "task_acc", "task_recall")


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trace(trace: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = [r["iteration"] for r in trace]
    for k in LOSS_KEYS:
        ax.plot(it, [r[k] for r in trace], label=k, lw=2 if k == "total" else 1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def plot_metrics(per_task: dict[str, dict], path: str | Path) -> Path:
    tasks = sorted(per_task)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / len(METRIC_KEYS)
    for j, k in enumerate(METRIC_KEYS):
        vals = [per_task[t].get(k) or 0.0 for t in tasks]
        ax.bar([i + j * width for i in range(len(tasks))], vals, width, label=k)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(tasks))], tasks)
    ax.set_xlabel("task (affordance:context)")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, ncol=3)
    return _finish(fig, path)


def plot_rho_sweep(rows: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = sorted(rows, key=lambda r: r["rho"])
    for k in ("ari", "ssor", "sa_sor"):
        ax.plot([r["rho"] for r in rows], [r.get(k) or 0.0 for r in rows], marker="o", label=k)
    ax.set_xlabel("rho")
    ax.set_ylabel("held-out score")
    ax.legend(fontsize=8)
    return _finish(fig, path)
