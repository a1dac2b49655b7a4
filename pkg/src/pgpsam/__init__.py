"""Prototype-guided prompt learning for few-shot segmentation at desk scale."""

from .config import CONFIG_VERSION, RunConfig, load_config
from .data import DATASET_VERSION, generate_dataset, load_dataset
from .errors import ConfigError, DataError, DimensionError, NumericError, PgpSamError
from .harness import METRICS_VERSION, run_ablation, run_eval, run_few_shot
from .pipeline import CHECKPOINT_VERSION, ModelConfig, PGPSam

__version__ = "0.1.0"

__all__ = [
    "CHECKPOINT_VERSION",
    "CONFIG_VERSION",
    "DATASET_VERSION",
    "METRICS_VERSION",
    "ConfigError",
    "DataError",
    "DimensionError",
    "ModelConfig",
    "NumericError",
    "PGPSam",
    "PgpSamError",
    "RunConfig",
    "generate_dataset",
    "load_config",
    "load_dataset",
    "run_ablation",
    "run_eval",
    "run_few_shot",
]
