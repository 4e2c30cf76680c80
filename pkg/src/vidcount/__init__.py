"""Temporal density-guided point counting for video, on a small numpy autodiff engine."""

from . import autodiff
from .evaluation import MetricsReport, compute_metrics, evaluate_split, filter_by_threshold
from .matching import LossWeights, hungarian, total_loss
from .model import ModelConfig, ModelParams, init_params, model_forward

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "MetricsReport", "ModelConfig", "ModelParams", "autodiff",
    "compute_metrics", "evaluate_split", "filter_by_threshold", "hungarian",
    "init_params", "model_forward", "total_loss",
]
