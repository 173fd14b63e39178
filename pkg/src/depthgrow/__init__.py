"""Grow a trained shallow encoder-decoder Transformer into a deeper one."""

from .autodiff import Parameter, Tensor, backward, no_grad
from .growth import GrownModel, ShallowModel, freeze_audit, grow
from .transformer import ModelConfig

__all__ = [
    "GrownModel",
    "ModelConfig",
    "Parameter",
    "ShallowModel",
    "Tensor",
    "backward",
    "freeze_audit",
    "grow",
    "no_grad",
]
__version__ = "0.1.0"
