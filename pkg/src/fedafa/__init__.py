"""Personalized federated learning with adversarial feature augmentation for local minority classes."""

from .augmentation import AugmentationConfig, augment_client, perturb_to_target, select_source_class
from .config import ExperimentConfig
from .data import Dataset, PartitionSpec, dirichlet_partition, generate_synthetic
from .experiment import build_benchmark, run_experiment, sweep
from .model import SplitModel, init_model

__all__ = [
    "AugmentationConfig", "Dataset", "ExperimentConfig", "PartitionSpec", "SplitModel",
    "augment_client", "build_benchmark", "dirichlet_partition", "generate_synthetic", "init_model",
    "perturb_to_target", "run_experiment", "select_source_class", "sweep",
]
