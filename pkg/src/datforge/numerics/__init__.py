"""Minimal dense-tensor engine: tape autodiff, layers, SGD, DTEN I/O."""

from datforge.numerics.functional import (
    activation,
    bce_with_logits,
    bilinear_interpolate,
    conv2d,
    cosine_map,
    cross_entropy_sum,
    l2_normalize,
    linear,
    relu,
    smooth_l1_sum,
)
from datforge.numerics.gradcheck import grad_check
from datforge.numerics.optim import SGD, ModelState, sgd_step
from datforge.numerics.tensor import Tensor, concat, exp, log, no_grad

__all__ = [
    "SGD",
    "ModelState",
    "Tensor",
    "activation",
    "bce_with_logits",
    "bilinear_interpolate",
    "concat",
    "conv2d",
    "cosine_map",
    "cross_entropy_sum",
    "exp",
    "grad_check",
    "l2_normalize",
    "linear",
    "log",
    "no_grad",
    "relu",
    "sgd_step",
    "smooth_l1_sum",
]
