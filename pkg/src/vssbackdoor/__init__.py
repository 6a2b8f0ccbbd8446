"""Backdoor poisoning experiments on selective-state-space vision classifiers."""

__version__ = "0.1.0"

from .errors import (ConfigError, DimensionError, DivergenceError, DomainError, EmptyMaskError,
                     FormatError, InfeasibleRateError, NumericError, PlanError, VssBackdoorError)
from .kernels import BACKEND

__all__ = [
    "__version__", "BACKEND",
    "ConfigError", "DimensionError", "DivergenceError", "DomainError", "EmptyMaskError",
    "FormatError", "InfeasibleRateError", "NumericError", "PlanError", "VssBackdoorError",
]
