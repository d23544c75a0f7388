"""Domain-incremental learning with shared/task-specific LoRA routing."""

from conec.errors import (
    ConecError,
    ConfigError,
    InvalidInputError,
    InvalidShapeError,
    NumericError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConecError",
    "ConfigError",
    "InvalidInputError",
    "InvalidShapeError",
    "NumericError",
    "StateError",
]
