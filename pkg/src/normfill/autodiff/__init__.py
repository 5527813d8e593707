"""Minimal dense tensors with reverse-mode autodiff."""

from . import functional
from .checkpoint import CheckpointError
from .gradcheck import finite_diff_check
from .nn import Conv2d, Module
from .optim import AdamState, adam_step
from .tensor import GraphError, NonFiniteError, Tensor, as_tensor, no_grad, parameter, precision

__all__ = [
    "AdamState", "CheckpointError", "Conv2d", "GraphError", "Module", "NonFiniteError", "Tensor",
    "adam_step", "as_tensor", "finite_diff_check", "functional", "no_grad", "parameter", "precision",
]
