"""Run configuration shared by the model, trainer and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # model dimensions
    d: int = 32
    H: int = 16
    W: int = 16
    K_o: int = 24
    K_g: int = 8
    n_blocks: int = 2
    heads: int = 4
    noise: float = 0.1
    # task vocabulary / categories
    n_categories: int = 8
    n_affordances: int = 2
    contexts_per_affordance: int = 2
    # loss
    lambda_ce: float = 2.0
    lambda_l1: float = 2.0
    lambda_giou: float = 5.0
    lambda_rank: float = 4.0
    rho: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    selection_loss: bool = True  # focal term on per-cell query-selection scores
    # grouping
    tau: float = 1.0
    tau_final: float | None = None  # linear anneal target; None keeps tau fixed
    straight_through: bool = True
    shared_gumbel: bool = False
    center_groups: bool = True  # centre object features over queries before the grouping logits
    # optimizer (decoupled weight decay Adam)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    iterations: int = 2000
    batch_size: int = 4
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only the final checkpoint
    # data
    train_data: str = ""
    val_data: str = ""
    table: str = ""
    # inference
    theta_rel: float | None = None  # None: calibrate on the training split after training
    det_thresh: float = 0.1
    nms_iou: float = 0.7

    _POSITIVE = ("d", "H", "W", "K_o", "K_g", "n_blocks", "heads", "n_categories", "n_affordances",
                 "contexts_per_affordance", "tau", "lr", "iterations", "batch_size", "log_every")

    def validate(self) -> "RunConfig":
        for name in self._POSITIVE:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda_ce", "lambda_l1", "lambda_giou", "lambda_rank", "rho", "weight_decay", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.d % 4 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by 4 and by heads={self.heads}")
        if self.K_g > self.K_o or self.K_o > self.H * self.W:
            raise ConfigError(f"need K_g <= K_o <= H*W, got K_g={self.K_g}, K_o={self.K_o}, H*W={self.H * self.W}")
        if self.tau_final is not None and self.tau_final <= 0:
            raise ConfigError("tau_final must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()
