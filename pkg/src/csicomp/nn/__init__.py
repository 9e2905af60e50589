"""Minimal differentiable layer set used by the denoise/compress networks."""
from .core import DTYPE, Parameter, glorot_uniform, require_finite
from .gradcheck import gradient_check
from .layers import BatchNorm2d, Conv2d, Dense, LeakyReLU, Tanh, residual_add

__all__ = [
    "DTYPE",
    "Parameter",
    "glorot_uniform",
    "require_finite",
    "gradient_check",
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "LeakyReLU",
    "Tanh",
    "residual_add",
]
