"""Interpretable region-to-region prototype self-attention on a small numpy autodiff engine."""

from .attention import R2RAttentionLayer, R2RForwardTrace
from .model import Model, ModelConfig, StageConfig, build
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Model",
    "ModelConfig",
    "R2RAttentionLayer",
    "R2RForwardTrace",
    "StageConfig",
    "Tensor",
    "backward",
    "build",
    "no_grad",
]
__version__ = "0.1.0"
