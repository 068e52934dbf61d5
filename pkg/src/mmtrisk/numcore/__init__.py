"""Float64 tensors with reverse-mode autodiff, Adam, and a gradient checker."""

from . import kernels
from .gradcheck import NonFiniteError, finite_diff_check
from .optim import AdamState, adam_step
from .tensor import (
    LAYER_NORM_EPS,
    ShapeError,
    Tensor,
    add,
    backward,
    concat_last_axis,
    concat_rows,
    dropout,
    embedding_lookup,
    forward_op,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    softplus,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "AdamState",
    "LAYER_NORM_EPS",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "concat_last_axis",
    "concat_rows",
    "dropout",
    "embedding_lookup",
    "finite_diff_check",
    "forward_op",
    "kernels",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_rows",
    "softplus",
    "sub",
    "sum_all",
    "transpose",
]
