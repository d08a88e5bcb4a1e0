"""Gaussian-process ODEs with prior and posterior planar normalizing flows."""

import jax

# Gradient checks and Cholesky solves need double precision.
jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    ContractViolation,
    DataParseError,
    DegenerateLayerError,
    DivergenceError,
    EmptyDataError,
    InversionFailure,
    SingularMatrixError,
    TrainingFailure,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractViolation",
    "DataParseError",
    "DegenerateLayerError",
    "DivergenceError",
    "EmptyDataError",
    "InversionFailure",
    "SingularMatrixError",
    "TrainingFailure",
]
