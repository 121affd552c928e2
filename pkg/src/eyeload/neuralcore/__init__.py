"""Small deterministic float64 network toolkit: layers, RoI-Align, optimizers, checkpoints."""

from .layers import (
    BatchNorm,
    Conv1d,
    Conv2d,
    GlobalAvgPool,
    Layer,
    Linear,
    ReLU,
    Sequential,
    conv_bn_relu,
)
from .model import Model
from .optim import SGD, Adam, make_optimizer, sgd_step
from .roialign import RoIAlign, roi_align

__all__ = [
    "Adam",
    "BatchNorm",
    "Conv1d",
    "Conv2d",
    "GlobalAvgPool",
    "Layer",
    "Linear",
    "Model",
    "ReLU",
    "RoIAlign",
    "SGD",
    "Sequential",
    "conv_bn_relu",
    "make_optimizer",
    "roi_align",
    "sgd_step",
]
