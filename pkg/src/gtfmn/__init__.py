"""Guided texture and feature modulation network for low-light super-resolution."""

__version__ = "0.1.0"

from .model import GtfmnConfig, GtfmnModel, IlluminationMap, count_parameters, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward, no_grad

__all__ = [
    "GtfmnConfig",
    "GtfmnModel",
    "IlluminationMap",
    "Tape",
    "Tensor",
    "backward",
    "count_parameters",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]
