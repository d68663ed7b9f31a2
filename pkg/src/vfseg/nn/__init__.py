"""From-scratch differentiable layers on float64 numpy arrays."""

from . import functional
from .gradcheck import finite_difference_grad, finite_difference_grad_at, max_rel_err
from .layers import (BatchNorm2d, Conv2d, ConvTranspose2d, Linear, MaxPool2d,
                     ReLU)
from .optim import SGD, Adam, make_optimizer
from .params import (BatchNormState, LayerParams, Tensor, as_tensor, he_normal,
                     layer_rng, xavier_uniform)

__all__ = [
    "functional",
    "finite_difference_grad",
    "finite_difference_grad_at",
    "max_rel_err",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "MaxPool2d",
    "ReLU",
    "SGD",
    "Adam",
    "make_optimizer",
    "BatchNormState",
    "LayerParams",
    "Tensor",
    "as_tensor",
    "he_normal",
    "layer_rng",
    "xavier_uniform",
]
