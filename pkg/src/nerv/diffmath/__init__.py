from . import autodiff
from .autodiff import GradientTape, Tensor, backward, no_record, stop_gradient
from .nn import DenseNetwork, PositionalEncodingSpec, forward, positional_encode
from .optim import AdamState, adam_step, lr_schedule

__all__ = [
    "autodiff",
    "GradientTape",
    "Tensor",
    "backward",
    "no_record",
    "stop_gradient",
    "DenseNetwork",
    "PositionalEncodingSpec",
    "forward",
    "positional_encode",
    "AdamState",
    "adam_step",
    "lr_schedule",
]
