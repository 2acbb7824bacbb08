"""The full context-embedded group ranking network: encoders -> TRM -> GGU -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders, ggu, trm
from .config import RunConfig
from .numerics import Tensor
from .scene_synth import SceneSample, TaskAnnotation, TaskSpec, make_task, vocab_size


@dataclass
class ModelOutput:
    fused: trm.FusedFeatures
    queries: trm.QuerySet
    objects: Tensor  # decoded object queries
    group_tokens: Tensor
    assignment: ggu.GroupAssignment
    grouped: ggu.GroupedFeatures
    theta_r: Tensor
    rel_logits: Tensor
    boxes: Tensor
    rank_scores: Tensor
    sel_logits: Tensor  # per-cell query-selection logits (affordance similarity)


def init_params(cfg: RunConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0x5EED])
    raw = {}
    raw.update(encoders.init_params(rng, cfg.n_categories, vocab_size(cfg.n_affordances, cfg.contexts_per_affordance), cfg.d))
    raw.update(trm.init_params(rng, cfg.d, cfg.n_blocks))
    raw.update(ggu.init_params(rng, cfg.d))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in sorted(raw.items())}


class CGRModel:
    def __init__(self, cfg: RunConfig, params: dict[str, Tensor] | None = None, theta_rel: float | None = None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg)
        self.theta_rel = cfg.theta_rel if theta_rel is None else theta_rel
        if self.theta_rel is None:
            self.theta_rel = float(7.5)
        self.tau = cfg.tau
        self.centers = encoders.cell_centers(cfg.H, cfg.W)

    def task_spec(self, task: TaskAnnotation | TaskSpec | tuple[int, int]) -> TaskSpec:
        if isinstance(task, TaskSpec):
            return task
        a, c = (task.affordance, task.context) if isinstance(task, TaskAnnotation) else task
        return make_task(a, c, self.cfg.n_affordances, self.cfg.contexts_per_affordance)

    def forward(
        self,
        scene: SceneSample,
        task,
        train: bool = False,
        rng: np.random.Generator | None = None,
        params: dict[str, Tensor] | None = None,
    ) -> ModelOutput:
        cfg = self.cfg
        p = self.params if params is None else params
        spec = self.task_spec(task)
        F_I = encoders.encode_scene(scene, p, cfg.H, cfg.W, cfg.noise)
        F_a, F_c = encoders.encode_task(spec, p)
        img, a, c = trm.enhance(F_I, F_a, F_c, p, cfg.heads)
        fused = trm.bidirectional_fuse(img, a, c, p)
        qs = trm.select_queries_and_groups(fused.I, fused.T_a, fused.T_c, cfg.K_o, cfg.K_g)
        sel = trm.selection_logits(fused.I, fused.T_a, p)
        O_t, G_t = trm.group_decode(qs.O, qs.G, fused.T_a, fused.I, p, cfg.n_blocks, cfg.heads)
        assign = ggu.gumbel_group(
            O_t, G_t, self.tau, rng, p, train=train, straight=cfg.straight_through, shared_noise=cfg.shared_gumbel,
            center=cfg.center_groups,
        )
        grouped = ggu.aggregate(O_t, assign)
        theta_r = ggu.graph_update(grouped.theta, fused.T_c, p)
        rel, boxes, rank = ggu.heads(O_t, theta_r, self.centers[qs.obj_idx], p)
        return ModelOutput(fused, qs, O_t, G_t, assign, grouped, theta_r, rel, boxes, rank, sel)

    def infer(self, scene: SceneSample, task, theta_rel: float | None = None, det_thresh: float | None = None):
        return ggu.infer(scene, task, self, theta_rel, det_thresh)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {state[k].shape} vs model shape {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
