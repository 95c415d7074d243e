"""Minimal float64 tensor engine with reverse-mode differentiation."""

from . import kernels, ops
from .core import (
    DimensionError,
    FlopTally,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    count_flops,
)
from .gradcheck import GradCheckError, analytic_gradient, grad_check, numerical_gradient
from .ops import (
    add,
    bin_sum,
    conv_nd,
    conv_nd_depthwise,
    gelu,
    layer_norm,
    matmul,
    max_pool_nd,
    mean,
    mul,
    pad,
    permute,
    reshape,
    scale,
    softmax_lastdim,
    sub,
    take,
    take_along_last,
)
from .ops import sum as tsum

__all__ = [
    "DimensionError", "FlopTally", "GradCheckError", "NonFiniteError", "Tape", "Tensor",
    "add", "analytic_gradient", "as_tensor", "bin_sum", "conv_nd", "conv_nd_depthwise",
    "count_flops", "gelu", "grad_check", "kernels", "layer_norm", "matmul", "max_pool_nd",
    "mean", "mul", "numerical_gradient", "ops", "pad", "permute", "reshape", "scale",
    "softmax_lastdim", "sub", "take", "take_along_last", "tsum",
]
