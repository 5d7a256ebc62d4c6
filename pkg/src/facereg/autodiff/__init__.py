"""Minimal reverse-mode autodiff on numpy arrays."""
from .params import Adam, ModelParams, adam_step, load_params, save_params
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    concat,
    cross,
    elu,
    gather,
    group_norm,
    l2_normalize,
    linear,
    masked_max_pool,
    matmul,
    mean,
    min_,
    mul,
    relu,
    reshape,
    scatter_add,
    sigmoid,
    softplus,
    sparse_matmul,
    sqrt,
    square,
    sub,
    sum_,
)

__all__ = [
    "Adam", "ModelParams", "ShapeError", "Tensor", "abs_", "adam_step", "add", "as_tensor",
    "concat", "cross", "elu", "gather", "group_norm", "l2_normalize", "linear", "load_params",
    "masked_max_pool", "matmul", "mean", "min_", "mul", "relu", "reshape", "save_params",
    "scatter_add", "sigmoid", "softplus", "sparse_matmul", "sqrt", "square", "sub", "sum_",
]
