"""Adaptive depth networks: residual stages with skippable sub-paths, trained by
two-pass self-distillation so any combination of sub-paths can be dropped at
inference time."""

__version__ = "0.1.0"

from .checkpoint import CheckpointError, load_model, save_model
from .data import DatasetError, LabeledImageSet, load_cifar10_binary, load_idx, synthetic_shapes
from .evaluation import SubnetRecord, evaluate, evaluate_all, pareto_report, residual_profile
from .network import (
    AdaptiveDepthNetwork,
    SkipConfig,
    build_from_config,
    build_resnet_tiny,
    build_vit_tiny,
    enumerate_subnets,
    flops,
    param_count,
)
from .tensor import Tensor, no_grad
from .training import TrainRecipe, train, train_step

__all__ = [
    "AdaptiveDepthNetwork",
    "CheckpointError",
    "DatasetError",
    "LabeledImageSet",
    "SkipConfig",
    "SubnetRecord",
    "Tensor",
    "TrainRecipe",
    "build_from_config",
    "build_resnet_tiny",
    "build_vit_tiny",
    "enumerate_subnets",
    "evaluate",
    "evaluate_all",
    "flops",
    "load_cifar10_binary",
    "load_idx",
    "load_model",
    "no_grad",
    "pareto_report",
    "param_count",
    "residual_profile",
    "save_model",
    "synthetic_shapes",
    "train",
    "train_step",
]
