"""Utility functions and tools."""

from .linalg_utils import CholeskyFactor, cholesky_or_raise, inverse, logdet, solve
from .logging_utils import configure_logging, format_vector, summarize_config
from .strategy_utils import (
    ErrorHandlingStrategy,
    parse_error_handling,
    should_halve,
    step_scale,
)

__all__ = [
    # Linear algebra
    "CholeskyFactor",
    "cholesky_or_raise",
    "inverse",
    "logdet",
    "solve",
    # Logging utilities
    "configure_logging",
    "format_vector",
    "summarize_config",
    # Halving and error handling
    "ErrorHandlingStrategy",
    "parse_error_handling",
    "should_halve",
    "step_scale",
]
