"""Learning from per-annotator labels along a continuum of architectures.

Families, from fully aggregated to fully annotator-specific:
``majority``, ``share_rec``, ``sep_heads``, ``sep_rec``, ``per_annotator``.
"""

from .continuum import (
    ArchitectureSpec,
    Model,
    build_model,
    count_parameters,
    coupling_penalty,
    encoder_divergence,
    load_model,
    predict,
    predict_all,
    save_model,
)
from .data import Dataset, Instance, SyntheticSpec, generate_synthetic, load_dataset
from .evaluation import EvaluationReport, aggregate_runs, fleiss_kappa, macro_f1, two_step_score
from .model_zoo import AnnotatorEncoderConfig, CombinerConfig, TextEncoderConfig
from .training import DEFAULT_SEEDS, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatorEncoderConfig",
    "ArchitectureSpec",
    "CombinerConfig",
    "Dataset",
    "EvaluationReport",
    "Instance",
    "Model",
    "DEFAULT_SEEDS",
    "SyntheticSpec",
    "TextEncoderConfig",
    "TrainConfig",
    "aggregate_runs",
    "build_model",
    "count_parameters",
    "coupling_penalty",
    "encoder_divergence",
    "fleiss_kappa",
    "generate_synthetic",
    "load_dataset",
    "load_model",
    "macro_f1",
    "predict",
    "predict_all",
    "save_model",
    "train",
    "two_step_score",
]
