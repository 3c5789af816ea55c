"""Dense tensor arithmetic with tape-based reverse-mode gradients."""

from .check import GradCheckReport, grad_check
from .ops import (
    abs,
    add,
    avg_pool2,
    bilinear_up2,
    concat,
    conv1x1,
    conv3x3,
    div,
    gap,
    instance_norm,
    l1,
    leaky_relu,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax_channel,
    softmax_spatial,
    softplus,
    sub,
    sum,
    tanh,
    transpose,
)
from .tensor import (
    Node,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    default_dtype,
    precision,
    record,
    set_default_dtype,
)

__all__ = [
    "GradCheckReport", "Node", "NonFiniteError", "ShapeError", "Tape", "Tensor", "abs", "add", "as_tensor",
    "avg_pool2", "bilinear_up2", "concat", "conv1x1", "conv3x3", "default_dtype", "div", "gap",
    "grad_check", "instance_norm", "l1", "leaky_relu", "matmul", "mean", "mul", "neg",
    "precision", "record", "relu", "reshape", "set_default_dtype", "sigmoid",
    "softmax_channel", "softmax_spatial", "softplus", "sub", "sum", "tanh", "transpose",
]
