"""Three-stream prompt-learning heads over frozen features, with a numpy autodiff tape."""

from __future__ import annotations

from .config import TrainConfig
from .data import FeatureDataset, GenSpec, generate
from .errors import (ContractError, DegenerateInputError, DomainError, FormatError, GaplError,
                     NumericError, ResourceGuardError, UsageError)
from .model import Model, forward, init_model
from .trainer import train

__version__ = "0.1.0"

__all__ = ["TrainConfig", "FeatureDataset", "GenSpec", "generate", "Model", "forward", "init_model",
           "train", "GaplError", "UsageError", "ContractError", "FormatError", "NumericError",
           "DegenerateInputError", "DomainError", "ResourceGuardError"]
