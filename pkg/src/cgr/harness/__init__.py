"""Training, evaluation, ablation and gradient-check drivers plus the CLI."""

from .ablation import ablate_rho
from .evaluate import calibrate_theta_rel, context_sensitivity, evaluate, predict_records, write_report
from .train import AdamW, NumericalError, Trainer, TrainResult, load_model, sample_loss, train

__all__ = [
    "AdamW",
    "NumericalError",
    "TrainResult",
    "Trainer",
    "ablate_rho",
    "calibrate_theta_rel",
    "context_sensitivity",
    "evaluate",
    "load_model",
    "predict_records",
    "sample_loss",
    "train",
    "write_report",
]
