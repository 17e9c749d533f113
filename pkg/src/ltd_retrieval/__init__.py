"""Contrastive dual-encoder retrieval with latent target decoding as a constraint."""

from .config import ExperimentConfig
from .data import DatasetSpec, generate_dataset
from .metrics import MetricsReport
from .harness import evaluate, run_fixed_target_mode, train

__all__ = [
    "DatasetSpec",
    "ExperimentConfig",
    "MetricsReport",
    "evaluate",
    "generate_dataset",
    "run_fixed_target_mode",
    "train",
]
__version__ = "0.1.0"
