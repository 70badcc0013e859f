"""Federated segmentation with deep supervision at intermediate layers.

A desk-scale simulator: a small encoder-decoder segmentation network trained
across a fleet of vehicles by federated averaging, with auxiliary supervision
and negative-entropy regularization at selected intermediate layers.
"""
from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, PartitionSpec, SceneConfig, dirichlet_partition, generate_dataset
from .diagnostics import BoundInputs, convergence_trend, heterogeneity, theorem1_bound
from .errors import (ConfigError, ContractError, DataError, DimensionError, FedDSRError, FormatError,
                     NonFiniteError, ProtocolError, UnsupportedVersionError)
from .experiment import ablate, report, run_experiment
from .federation import Architecture, RoundConfig, run_federation
from .metrics import compute_metrics, update_confusion
from .model import TapSpec, build_adapters, build_network, resolve_taps
from .objectives import LossWeights, objective
from .tensor import GradientTape, RngStream, Tensor, precision, set_precision

__all__ = [
    "ExperimentConfig", "load_config", "parse_config", "Dataset", "PartitionSpec", "SceneConfig",
    "dirichlet_partition", "generate_dataset", "BoundInputs", "convergence_trend", "heterogeneity",
    "theorem1_bound", "ConfigError", "ContractError", "DataError", "DimensionError", "FedDSRError",
    "FormatError", "NonFiniteError", "ProtocolError", "UnsupportedVersionError", "ablate", "report", "run_experiment", "Architecture", "RoundConfig",
    "run_federation", "compute_metrics", "update_confusion", "TapSpec", "build_adapters",
    "build_network", "resolve_taps", "LossWeights", "objective", "GradientTape", "RngStream",
    "Tensor", "precision", "set_precision",
]

__version__ = "0.1.0"
