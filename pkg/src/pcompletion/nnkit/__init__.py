"""Minimal differentiable kernels: layers, optimizer, gradient checks, checkpoints."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, numeric_gradient, relative_error
from .layers import (
    BatchNorm,
    Conv2d,
    Linear,
    ParamStore,
    SNLinear,
    dropout,
    dropout_backward,
    leaky_relu,
    leaky_relu_backward,
    linear,
    linear_backward,
    power_iterate,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    spectral_normalize,
    spectral_normalize_backward,
)
from .optim import Adam, adam_step
