from .functional import bce_loss, focal_loss, smooth_l1
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import MLP, Linear, MlpSpec, Module, mlp, mlp_forward
from .optim import AdamW, adamw_step
from .tensor import (NonFiniteError, Tensor, as_tensor, concat, exp, gather_rows, getitem, log,
                     matmul, mean, no_grad, relu, reshape, scatter_rows, segment_max, sigmoid,
                     transpose, tsum, weighted_gather)

__all__ = [
    "AdamW", "Linear", "MLP", "MlpSpec", "Module", "NonFiniteError", "Tensor", "adamw_step",
    "as_tensor", "bce_loss", "check_gradients", "concat", "exp", "focal_loss", "gather_rows",
    "getitem", "log", "matmul", "mean", "mlp", "mlp_forward", "no_grad", "numeric_grad",
    "relative_error", "relu", "reshape", "scatter_rows", "segment_max", "sigmoid", "smooth_l1",
    "transpose", "tsum", "weighted_gather",
]
