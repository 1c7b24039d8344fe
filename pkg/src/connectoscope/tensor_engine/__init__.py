"""Minimal reverse-mode autodiff with the layers the classifiers need."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .ops import (
    BatchNormState,
    activation,
    batchnorm,
    bce_loss,
    conv3d,
    dense,
    dropout,
    l1_penalty,
    maxpool3d,
    mse_loss,
    parameter,
    relu,
    selu,
    sigmoid,
)
from .optim import OptimizerState, optimizer_step
from .tensor import Tensor, flatten, mean, no_grad, reshape
