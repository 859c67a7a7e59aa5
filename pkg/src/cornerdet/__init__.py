"""Anchor-free corner-keypoint object detection engine."""

from .tensor import Tensor, Parameter, backward, no_grad
from .network import ModelConfig, Model, build_model, param_count, prune_center_branch

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
    "ModelConfig",
    "Model",
    "build_model",
    "param_count",
    "prune_center_branch",
    "__version__",
]
