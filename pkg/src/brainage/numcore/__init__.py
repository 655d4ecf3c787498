from .conv import conv3d, conv_output_shape
from .gradcheck import gradcheck, numerical_grad, relative_error
from .rng import DeterministicRng, stable_hash
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concatenate,
    div,
    exp,
    gelu,
    is_grad_enabled,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    softmax_rows,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    swapaxes,
    transpose,
)
from .tensorio import read_tensor, write_tensor

__all__ = [
    "DeterministicRng",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concatenate",
    "conv3d",
    "conv_output_shape",
    "div",
    "exp",
    "gelu",
    "gradcheck",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numerical_grad",
    "read_tensor",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "slice_",
    "softmax",
    "softmax_rows",
    "sqrt",
    "square",
    "stable_hash",
    "stack",
    "sub",
    "sum_",
    "swapaxes",
    "transpose",
    "write_tensor",
]
