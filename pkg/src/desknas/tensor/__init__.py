"""Minimal reverse-mode autodiff engine with the image operations used by the search."""

from .core import (
    ShapeError,
    Tensor,
    add,
    concat,
    default_dtype,
    exp,
    log,
    log_softmax,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    stack,
    take,
    tsum,
    weighted_sum,
)
from .layers import OPS, PARAMETER_FREE, Module, build_op
from .optim import TrainState, cosine_lr, sgd_momentum_step

__all__ = [
    "OPS",
    "PARAMETER_FREE",
    "Module",
    "ShapeError",
    "Tensor",
    "TrainState",
    "add",
    "build_op",
    "concat",
    "cosine_lr",
    "default_dtype",
    "exp",
    "log",
    "log_softmax",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "reshape",
    "set_default_dtype",
    "sgd_momentum_step",
    "softmax",
    "stack",
    "take",
    "tsum",
    "weighted_sum",
]
