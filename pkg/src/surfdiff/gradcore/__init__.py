from .tensor import (
    GradcoreError,
    Tape,
    Tensor,
    abs_,
    add,
    concat,
    conv2d,
    conv2d_transpose,
    div,
    exp,
    getitem,
    grid_sample,
    grid_sample_jvp,
    leaky_relu,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    sin,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
    upsample2x,
)
from .nn import Adam, Module, kaiming_conv, kaiming_linear, param, zeros
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "GradcoreError", "Tape", "Tensor",
    "abs_", "add", "concat", "conv2d", "conv2d_transpose", "div", "exp",
    "getitem", "grid_sample", "grid_sample_jvp", "leaky_relu", "matmul",
    "mean", "mul", "reshape", "sigmoid", "sin", "softplus", "sqrt", "stack",
    "sub", "sum_", "tanh", "transpose", "upsample2x",
    "Adam", "Module", "kaiming_conv", "kaiming_linear", "param", "zeros",
    "load_checkpoint", "save_checkpoint",
]
