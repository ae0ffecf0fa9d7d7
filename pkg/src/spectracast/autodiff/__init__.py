"""Tensor arithmetic, reverse-mode gradients, gradient checking and Adam."""
from .adam import Adam, AdamState, adam_step
from .blob import read_blob, write_blob
from .functional import conv2d, gelu, glinear, layer_norm, mse, sigmoid, softmax_lastdim, tanh
from .gradcheck import grad_check
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    div,
    exp,
    get_dtype,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    roll,
    set_debug,
    set_precision,
    square,
    stack,
    sub,
    swap_last,
    take,
    transpose,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "Tensor", "add", "adam_step", "as_tensor", "clamp", "concat",
    "conv2d", "div", "exp", "gelu", "get_dtype", "getitem", "glinear", "grad_check",
    "is_grad_enabled", "layer_norm", "log", "matmul", "mean", "mse", "mul", "no_grad",
    "precision", "read_blob", "reshape", "roll", "set_debug", "set_precision", "sigmoid",
    "softmax_lastdim", "square", "stack", "sub", "swap_last", "take", "tanh", "transpose",
    "tsum", "write_blob",
]
