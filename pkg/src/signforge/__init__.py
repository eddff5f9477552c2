"""signforge: a from-scratch CNN engine and sign-alphabet recognition service."""

from .errors import (ConfigError, ContractError, FileTruncatedError, FormatError,
                     NumericError, ShapeError, SignForgeError)
from .models import (LABELS, Model, build_asl_cnn, build_vgg16_transfer,
                     load_weights, param_count, predict, save_weights)
from .trainer import TrainConfig, cross_entropy_loss, evaluate, train

__all__ = [
    "ConfigError", "ContractError", "FileTruncatedError", "FormatError",
    "NumericError", "ShapeError", "SignForgeError",
    "LABELS", "Model", "build_asl_cnn", "build_vgg16_transfer",
    "load_weights", "param_count", "predict", "save_weights",
    "TrainConfig", "cross_entropy_loss", "evaluate", "train",
]

__version__ = "0.1.0"
