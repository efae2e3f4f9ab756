"""Differentiable-computation substrate: tensors, primitives, AdamW."""

from .gradcheck import GradCheckReport, grad_check
from .optim import LR_DECAY_FACTOR, AdamW, OptimizerState, adamw_step, lr_at_step
from .ops import (
    PRIMITIVE_OPS,
    add,
    avg_pool2d,
    concat,
    conv2d,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    primitive_forward,
    relu,
    reshape,
    sigmoid,
    softmax,
    split,
    sub,
    sum_,
    transpose,
    upsample2d_bilinear,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "Tensor", "ShapeError", "GradCheckReport", "grad_check",
    "AdamW", "OptimizerState", "adamw_step", "lr_at_step", "LR_DECAY_FACTOR",
    "PRIMITIVE_OPS", "primitive_forward",
    "add", "sub", "mul", "neg", "log", "matmul", "conv2d", "avg_pool2d",
    "max_pool2d", "relu", "sigmoid", "softmax", "log_softmax", "layer_norm",
    "concat", "split", "reshape", "transpose", "upsample2d_bilinear",
    "sum_", "mean",
]
