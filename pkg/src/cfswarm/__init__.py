"""Counterfactual treatment-effect estimation on simulated flocking worlds.

A float64 reverse-mode tensor engine, a zonal flocking simulator with
ground-truth counterfactual rollouts, variational sequence models with a
physics-informed transition layer, and the training/evaluation harness
that ties them together.
"""

__version__ = "0.1.0"

from .boids import SimConfig, simulate
from .config import RunConfig, load_config
from .data import Dataset, generate_dataset, ground_truth_ite, \
    load_dataset, save_dataset
from .errors import ConfigError, ContractError, DimensionError, \
    DomainError, NumericError
from .gradcheck import run_gradcheck
from .losses import LossWeights, loss_total
from .metrics import MetricsReport, evaluate
from .model import CrnModel, ModelDims, ModelVariant, predict_ite
from .rng import Rng, derive_seed
from .sweep import default_grid, sensitivity_sweep
from .tensor import Tape, Tensor
from .training import TrainConfig, train

__all__ = [
    "__version__",
    "SimConfig", "simulate",
    "RunConfig", "load_config",
    "Dataset", "generate_dataset", "ground_truth_ite",
    "load_dataset", "save_dataset",
    "ConfigError", "ContractError", "DimensionError",
    "DomainError", "NumericError",
    "run_gradcheck",
    "LossWeights", "loss_total",
    "MetricsReport", "evaluate",
    "CrnModel", "ModelDims", "ModelVariant", "predict_ite",
    "Rng", "derive_seed",
    "default_grid", "sensitivity_sweep",
    "Tape", "Tensor",
    "TrainConfig", "train",
]
