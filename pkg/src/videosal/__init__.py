"""Desk-scale video saliency prediction on a small numpy autograd."""

from .autograd import (ParameterStore, Tape, Tensor, backward, finite_diff_grad,
                       set_debug_checks)
from .errors import (ConfigError, ContractError, DegenerateMapError,
                     DimensionError, FormatError, NumericsError, VideosalError)
from .model import ModelConfig, SaliencyModel, TrainConfig, Trainer, VideoClip

__all__ = [
    "ParameterStore", "Tape", "Tensor", "backward", "finite_diff_grad",
    "set_debug_checks", "VideosalError", "DimensionError", "ContractError",
    "ConfigError", "FormatError", "NumericsError", "DegenerateMapError",
    "ModelConfig", "SaliencyModel", "TrainConfig", "Trainer", "VideoClip",
]
__version__ = "0.1.0"
