"""Minimal NHWC tensor autodiff, layers and optimizer used by the denoisers."""

from .autodiff import Tensor, concat
from .layers import Conv2d, GroupNorm, Linear, Module, Parameter
from .optim import Adam
