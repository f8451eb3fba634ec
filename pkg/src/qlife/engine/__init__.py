"""Small reverse-mode training engine on top of NumPy."""

from .gradcheck import numerical_gradient, relative_error
from .layers import (
    AdaptiveAvgPool2d,
    BackwardError,
    BatchNorm1d,
    Conv2d,
    Dense,
    Dropout,
    GradReverse,
    Layer,
    ReLU,
    ShapeError,
    SpatialPyramidPool,
    adaptive_avg_pool,
    bin_edges,
)
from .losses import cross_entropy, log_softmax, softmax
from .network import Sequential, backward, forward, params_digest
from .optim import SGD, Adam, Optimizer, make_optimizer, sgd_step

__all__ = [
    "AdaptiveAvgPool2d", "Adam", "BackwardError", "BatchNorm1d", "Conv2d", "Dense", "Dropout",
    "GradReverse", "Layer", "Optimizer", "ReLU", "SGD", "Sequential", "ShapeError",
    "SpatialPyramidPool", "adaptive_avg_pool", "backward", "bin_edges", "cross_entropy", "forward",
    "log_softmax", "make_optimizer", "numerical_gradient", "params_digest", "relative_error",
    "sgd_step", "softmax",
]
