"""CTSAR-CNN: a residual, self-attention CNN for teat-end image scoring, on a numpy autograd core."""

from .layers import CTSARCNN, LayerSpec, build_ctsar_cnn, model_from_state
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, class_weights_from_counts, evaluate, train, weighted_cross_entropy

__version__ = "0.1.0"

__all__ = [
    "CTSARCNN",
    "LayerSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_ctsar_cnn",
    "class_weights_from_counts",
    "evaluate",
    "model_from_state",
    "no_grad",
    "train",
    "weighted_cross_entropy",
]
