from .rng import Rng
from .tensor import (
    Tensor,
    bilinear_resize_grid,
    gather_rows,
    layernorm,
    matmul,
    ones,
    parameter,
    silu,
    sinusoidal_embedding,
    softmax_lastdim,
    strided_group_conv2d,
    zeros,
)
from .gradcheck import GradCheckReport, ParamReport, check_gradients

__all__ = [
    "Rng",
    "Tensor",
    "bilinear_resize_grid",
    "gather_rows",
    "layernorm",
    "matmul",
    "ones",
    "parameter",
    "silu",
    "sinusoidal_embedding",
    "softmax_lastdim",
    "strided_group_conv2d",
    "zeros",
    "GradCheckReport",
    "ParamReport",
    "check_gradients",
]
