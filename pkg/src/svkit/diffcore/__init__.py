"""Reverse-mode autodiff kernel: tensors, ops, Adam, gradient checking."""

from .gradcheck import grad_check
from .optim import AdamState, adam_step
from .ops import (
    POOL_VAR_FLOOR,
    BatchNormState,
    add,
    affine,
    batchnorm1d,
    dilated_conv1d,
    gather_cols,
    l2_sum,
    mse_sq,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    stats_pool,
    sum_all,
)
from .tensor import Tensor

__all__ = [
    "AdamState",
    "BatchNormState",
    "POOL_VAR_FLOOR",
    "Tensor",
    "adam_step",
    "add",
    "affine",
    "batchnorm1d",
    "dilated_conv1d",
    "gather_cols",
    "grad_check",
    "l2_sum",
    "mse_sq",
    "relu",
    "reshape",
    "scale",
    "softmax_cross_entropy",
    "stats_pool",
    "sum_all",
]
