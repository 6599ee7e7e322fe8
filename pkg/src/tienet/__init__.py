"""Joint multi-label image classification and report generation on a
numpy autodiff core, with synthetic planted-structure data for
desk-scale experiments."""

__version__ = "0.1.0"

from .autodiff import Tensor, gradcheck, no_grad
from .model import ModelConfig, TieNetModel
from .training import TrainConfig

__all__ = [
    "Tensor",
    "gradcheck",
    "no_grad",
    "ModelConfig",
    "TieNetModel",
    "TrainConfig",
    "__version__",
]
