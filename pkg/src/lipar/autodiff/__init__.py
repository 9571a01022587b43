"""Minimal dense-tensor engine with reverse-mode differentiation."""
from . import functional, kernels
from .analytic import conv_param_count, receptive_field
from .functional import (
    BatchNormStats,
    adaptive_avg_pool2d,
    average,
    batch_norm2d,
    concat,
    conv2d,
    depthwise_conv2d,
    dropout,
    linear,
    relu,
    softmax,
    softmax_cross_entropy,
)
from .lstm import lstm_forward, lstm_layer, lstm_param_count
from .optim import AdamState, adam_step
from .tensor import GraphError, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "AdamState",
    "BatchNormStats",
    "GraphError",
    "Tensor",
    "adam_step",
    "adaptive_avg_pool2d",
    "average",
    "backward",
    "batch_norm2d",
    "concat",
    "conv2d",
    "conv_param_count",
    "depthwise_conv2d",
    "dropout",
    "functional",
    "grad_enabled",
    "kernels",
    "linear",
    "lstm_forward",
    "lstm_layer",
    "lstm_param_count",
    "no_grad",
    "receptive_field",
    "relu",
    "softmax",
    "softmax_cross_entropy",
]
