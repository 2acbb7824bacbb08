"""Training loop, decoupled-weight-decay Adam, and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..config import RunConfig
from ..losses import LossBreakdown, LossWeights, center_cells, hungarian_match, total_loss
from ..model import CGRModel
from ..numerics import Tensor, backward, load_archive, save_archive
from ..scene_synth import SceneSample, TaskAnnotation, load_dataset

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "ce", "sel", "l1", "giou", "rank", "total", "tau")


class NumericalError(RuntimeError):
    """A loss component became NaN or infinite."""


class AdamW:
    """Adam with decoupled weight decay on matrix-shaped parameters.

    Parameters that received no gradient in a step are left untouched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.weight_decay and p.data.ndim == 2:
                p.data = p.data * (1 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"])
            self.v[k] = np.array(tensors[f"adam.v.{k}"])
        self.t = t


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cfg.lambda_ce, cfg.lambda_l1, cfg.lambda_giou, cfg.lambda_rank)


def sample_loss(model: CGRModel, scene: SceneSample, task: TaskAnnotation, rng: np.random.Generator | None, train: bool = True, params=None) -> LossBreakdown:
    cfg = model.cfg
    out = model.forward(scene, task, train=train, rng=rng, params=params)
    gt_boxes = scene.boxes()
    match = hungarian_match(out.boxes.data, out.rel_logits.data, gt_boxes, 1.0, cfg.lambda_l1, cfg.lambda_giou)
    return total_loss(
        out.rel_logits,
        out.boxes,
        out.rank_scores,
        gt_boxes,
        task.ranks,
        match,
        loss_weights(cfg),
        cfg.rho,
        cfg.focal_alpha,
        cfg.focal_gamma,
        sel_logits=out.sel_logits if cfg.selection_loss else None,
        sel_targets=center_cells(cfg.H, cfg.W, gt_boxes),
    )


def tau_at(cfg: RunConfig, iteration: int) -> float:
    if cfg.tau_final is None or cfg.iterations <= 1:
        return cfg.tau
    frac = min(max((iteration - 1) / (cfg.iterations - 1), 0.0), 1.0)
    return cfg.tau + frac * (cfg.tau_final - cfg.tau)


@dataclass
class Trainer:
    cfg: RunConfig
    data: Sequence[SceneSample]
    model: CGRModel = None
    iteration: int = 0
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.data:
            raise ValueError("training set is empty")
        if self.model is None:
            self.model = CGRModel(self.cfg)
        self.rng = np.random.default_rng([self.cfg.seed, 0xDA7A])
        self.opt = AdamW(
            self.model.params,
            self.cfg.lr,
            (self.cfg.beta1, self.cfg.beta2),
            self.cfg.adam_eps,
            self.cfg.weight_decay,
        )

    def step(self) -> dict[str, float]:
        """One optimizer step on a batch of (scene, one sampled task) pairs."""
        cfg, model = self.cfg, self.model
        self.iteration += 1
        model.tau = tau_at(cfg, self.iteration)
        zero_grad(model.params)
        idx = self.rng.integers(len(self.data), size=cfg.batch_size)
        sums = dict.fromkeys(("ce", "sel", "l1", "giou", "rank", "total"), 0.0)
        for i in idx:
            scene = self.data[int(i)]
            task = scene.tasks[int(self.rng.integers(len(scene.tasks)))]
            lb = sample_loss(model, scene, task, self.rng, train=True)
            vals = lb.values()
            for k, v in vals.items():
                if not math.isfinite(v):
                    raise NumericalError(f"non-finite {k} loss at iteration {self.iteration} (scene {scene.scene_id})")
                sums[k] += v / cfg.batch_size
            backward(lb.total * (1.0 / cfg.batch_size))
        clip_grad_norm(model.params, cfg.grad_clip)
        self.opt.step()
        row = {"iteration": self.iteration, **sums, "tau": model.tau}
        if self.iteration == 1 or self.iteration % cfg.log_every == 0 or self.iteration == cfg.iterations:
            self.trace.append(row)
            log.info("iter %d total %.4f (ce %.4f l1 %.4f giou %.4f rank %.4f)", self.iteration, sums["total"], sums["ce"], sums["l1"], sums["giou"], sums["rank"])
        return row

    def run(self, until: int | None = None, checkpoint_path: str | Path | None = None) -> list[dict]:
        until = self.cfg.iterations if until is None else until
        every = self.cfg.checkpoint_every
        while self.iteration < until:
            try:
                self.step()
            except NumericalError:
                log.error("aborting; last checkpoint kept at %s", checkpoint_path)
                raise
            if checkpoint_path and every and self.iteration % every == 0:
                self.save(checkpoint_path)
        return self.trace

    # -- checkpoints --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        tensors = dict(self.model.state())
        tensors.update(self.opt.state())
        meta = {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "adam_t": self.opt.t,
            "rng_state": self.rng.bit_generator.state,
            "theta_rel": self.model.theta_rel,
            "trace": self.trace,
        }
        save_archive(path, tensors, meta)

    @classmethod
    def resume(cls, path: str | Path, data: Sequence[SceneSample]) -> "Trainer":
        tensors, meta = load_archive(path)
        cfg = RunConfig.from_dict(meta["config"])
        tr = cls(cfg, data)
        tr.model.load_state(tensors)
        tr.model.theta_rel = meta.get("theta_rel", tr.model.theta_rel)
        tr.opt.load_state(tensors, int(meta["adam_t"]))
        tr.rng.bit_generator.state = meta["rng_state"]
        tr.iteration = int(meta["iteration"])
        tr.trace = list(meta.get("trace", []))
        return tr


def load_model(path: str | Path, cfg: RunConfig | None = None) -> CGRModel:
    """Rebuild a model from a checkpoint; ``cfg`` (if given) must match the stored shapes."""
    tensors, meta = load_archive(path)
    stored = RunConfig.from_dict(meta["config"])
    model = CGRModel(cfg or stored)
    model.load_state(tensors)
    model.theta_rel = meta.get("theta_rel", model.theta_rel)
    return model


def write_trace_csv(trace: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in TRACE_FIELDS})


@dataclass
class TrainResult:
    model: CGRModel
    trace: list[dict]
    checkpoint: Path | None


def train(cfg: RunConfig, out_dir: str | Path | None = None, data: Sequence[SceneSample] | None = None, calibrate: bool = True) -> TrainResult:
    """Train from scratch; writes checkpoint, trace and config into ``out_dir`` when given."""
    from .evaluate import calibrate_theta_rel

    cfg.validate()
    if data is None:
        if not cfg.train_data:
            raise ValueError("config has no train_data path")
        data = load_dataset(cfg.train_data)
    tr = Trainer(cfg, data)
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.ckpt"
        cfg.save(out_dir / "config.json")
    tr.run(checkpoint_path=ckpt)
    if calibrate and cfg.theta_rel is None:
        tr.model.theta_rel = calibrate_theta_rel(tr.model, data)
    if out_dir is not None:
        tr.save(ckpt)
        write_trace_csv(tr.trace, out_dir / "trace.csv")
        (out_dir / "trace.json").write_text(json.dumps(tr.trace, indent=1))
    return TrainResult(tr.model, tr.trace, ckpt)
