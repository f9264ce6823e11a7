"""Minimal dense-tensor core: autodiff, optimizers, schedules, checkpoints."""
from . import functional
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import AdamState, adam_step
from .schedules import lr_inverse_sqrt, lr_triangular
from .tensor import (
    Tensor,
    as_tensor,
    debug_checks,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "Checkpoint",
    "Tensor",
    "adam_step",
    "as_tensor",
    "debug_checks",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "load_checkpoint",
    "lr_inverse_sqrt",
    "lr_triangular",
    "no_grad",
    "save_checkpoint",
    "set_default_dtype",
]
