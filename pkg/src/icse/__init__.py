"""Model-free in-context state estimation for a class of evaporation processes."""

from .process import ClassPrior, NoiseSpec, ProcessParams, Trajectory, simulate_trajectory
from .transformer import ModelConfig, Standardizer, count_parameters, forward
from .trainer import TrainConfig, train
from .ekf import EkfConfig, run_filter
from .evaluation import EvalConfig, evaluate

__all__ = [
    "ClassPrior", "NoiseSpec", "ProcessParams", "Trajectory", "simulate_trajectory",
    "ModelConfig", "Standardizer", "count_parameters", "forward",
    "TrainConfig", "train", "EkfConfig", "run_filter", "EvalConfig", "evaluate",
]
