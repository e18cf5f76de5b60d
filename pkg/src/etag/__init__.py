"""Class-incremental learning with embedding distillation and task-oriented feature generation."""

from .config import RunConfig, load_config
from .errors import (DomainError, EtagError, EvaluationError, FormatError, NonFiniteLossError,
                     ShapeError, UsageError)

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "DomainError", "EtagError", "EvaluationError", "FormatError",
           "NonFiniteLossError", "ShapeError", "UsageError", "__version__"]
