"""Minimal reverse-mode autodiff and the kernels a small decoder needs."""

from .ops import (
    add,
    causal_mask,
    concat,
    cross_entropy,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    mean_all,
    mul,
    reshape,
    scaled_dot_attention,
    softmax_rows,
    sum_all,
    transpose,
)
from .optim import ParamStore, adam_step
from .tensor import NonFiniteValue, ShapeMismatch, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "NonFiniteValue",
    "ParamStore",
    "ShapeMismatch",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "causal_mask",
    "concat",
    "cross_entropy",
    "gelu",
    "getitem",
    "grad_enabled",
    "layer_norm",
    "linear",
    "matmul",
    "mean_all",
    "mul",
    "no_grad",
    "reshape",
    "scaled_dot_attention",
    "softmax_rows",
    "sum_all",
    "transpose",
]
