"""Reverse-mode autodiff over numpy arrays."""
from .core import (Tensor, as_tensor, backward, concat, grad_enabled, no_grad, split, stack,
                   zeros)
from .functional import (apply_activation, batch_norm, conv2d, conv_transpose2d, interpolate,
                         linear, pool)
from .gradcheck import check_gradients
from .nn import BatchNorm2d, Conv2d, ConvBNAct, ConvTranspose2d, Linear, Module, Parameter, manual_seed

__all__ = [
    "Tensor", "as_tensor", "backward", "concat", "grad_enabled", "no_grad", "split", "stack", "zeros",
    "apply_activation", "batch_norm", "conv2d", "conv_transpose2d", "interpolate", "linear", "pool",
    "check_gradients", "BatchNorm2d", "Conv2d", "ConvBNAct", "ConvTranspose2d", "Linear", "Module",
    "Parameter", "manual_seed",
]
