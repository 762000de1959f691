"""Minimal differentiable-kernel substrate: tensors, layers, Adam, weight files."""

from . import tensor
from .gradcheck import check_gradients, relative_error
from .layers import (
    FORMAT_VERSION,
    ParameterStore,
    channel_max_pool,
    conv1d,
    conv2d,
    default_groups,
    group_norm,
    linear,
    mlp,
    softmax,
)
from .optim import Adam, AdamState, adam_step
from .serialize import load_weights, save_weights
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "Adam", "AdamState", "FORMAT_VERSION", "ParameterStore", "Tensor", "adam_step", "as_tensor",
    "backward", "channel_max_pool", "check_gradients", "conv1d", "conv2d", "default_groups",
    "group_norm", "linear", "load_weights", "mlp", "relative_error", "save_weights", "softmax",
    "tensor",
]
