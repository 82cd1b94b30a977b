"""Small reverse-mode autodiff engine and the layers the transducer needs."""

from .gradcheck import GradCheckReport, finite_difference_check, numeric_grad, relative_error
from .optim import AdamConfig, AdamState, adam_step, global_norm, warmup_lr
from .params import ParamSet
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "AdamConfig",
    "AdamState",
    "GradCheckReport",
    "ParamSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "finite_difference_check",
    "global_norm",
    "no_grad",
    "numeric_grad",
    "relative_error",
    "warmup_lr",
]
