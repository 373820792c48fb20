"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .ops import (
    add,
    avg_pool2x2,
    batchnorm2d,
    concat,
    concat_channels,
    conv2d,
    global_avg_pool,
    linear,
    mean,
    mul,
    relu,
    softmax,
    softmax_array,
    softmax_cross_entropy,
    split,
    square_sum,
    sub,
    tanh,
)
from .tensor import ComputeGraph, NonFiniteError, Tensor, as_tensor

__all__ = [
    "ComputeGraph",
    "NonFiniteError",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool2x2",
    "batchnorm2d",
    "concat",
    "concat_channels",
    "conv2d",
    "global_avg_pool",
    "linear",
    "mean",
    "mul",
    "relu",
    "softmax",
    "softmax_array",
    "softmax_cross_entropy",
    "split",
    "square_sum",
    "sub",
    "tanh",
]
