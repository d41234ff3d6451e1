"""Experiment harness: config, training/evaluation loops, reports."""

from .config import HarnessConfig, MatrixSettings, TrainSettings, parse_config
from .loop import (
    Adam,
    TrainResult,
    assemble_batch,
    augment_sample,
    confusion_over,
    evaluate,
    evaluate_sharded,
    iter_batches,
    load_model,
    matrix_csv,
    predict,
    run_matrix,
    seed_means,
    train,
)

__all__ = [
    "Adam",
    "HarnessConfig",
    "MatrixSettings",
    "TrainResult",
    "TrainSettings",
    "assemble_batch",
    "augment_sample",
    "confusion_over",
    "evaluate",
    "evaluate_sharded",
    "iter_batches",
    "load_model",
    "matrix_csv",
    "parse_config",
    "predict",
    "run_matrix",
    "seed_means",
    "train",
]
