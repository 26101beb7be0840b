"""Minimal reverse-mode automatic differentiation over dense arrays."""

from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    EVAL,
    TRAIN,
    BatchNormState,
    add,
    batch_norm,
    conv2d,
    dropout,
    fully_connected,
    global_average_pool,
    l2_loss,
    relu,
    scale,
)
from .optim import glorot_bound, glorot_init, sgd_step
from .tensor import GraphError, NonFiniteError, Parameter, Tensor, backward, precision

__all__ = [
    "EVAL",
    "TRAIN",
    "BatchNormState",
    "GraphError",
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "add",
    "backward",
    "batch_norm",
    "conv2d",
    "dropout",
    "fully_connected",
    "global_average_pool",
    "glorot_bound",
    "glorot_init",
    "l2_loss",
    "load_checkpoint",
    "precision",
    "relu",
    "save_checkpoint",
    "scale",
    "sgd_step",
]
