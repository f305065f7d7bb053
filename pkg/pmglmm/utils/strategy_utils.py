"""
Shared failure-handling and step-halving utilities.

This module provides the error-handling strategy used by multi-start fits and simulation
studies, and the halving schedule used by every damped Newton loop.
"""
import logging
from enum import Enum
from typing import Union

logger = logging.getLogger(__name__)


class ErrorHandlingStrategy(Enum):
    """What to do when one unit of a batch (a start, a replication) fails"""
    FAIL_FAST = "fail_fast"  # Raise immediately
    RECORD_AND_CONTINUE = "record_and_continue"  # Record the failure and move on


def parse_error_handling(value: Union[str, ErrorHandlingStrategy]) -> ErrorHandlingStrategy:
    """
    Parse an error-handling strategy from a string or enum.

    Raises:
        ValueError: If the string is not a valid strategy
    """
    if isinstance(value, ErrorHandlingStrategy):
        return value
    try:
        return ErrorHandlingStrategy(value)
    except ValueError:
        raise ValueError(
            f"Invalid error handling strategy: '{value}'. "
            f"Valid options: {[s.value for s in ErrorHandlingStrategy]}"
        )


def step_scale(attempt: int, base: float = 0.5) -> float:
    """
    Scale applied to a Newton step on the given halving attempt.

    Example:
        >>> step_scale(0)
        1.0
        >>> step_scale(3)
        0.125
    """
    return base ** attempt


def should_halve(attempt: int, max_halvings: int) -> bool:
    """
    Whether another halving is allowed after `attempt` rejected trials.

    Example:
        >>> should_halve(0, 30)
        True
        >>> should_halve(30, 30)
        False
    """
    return attempt < max_halvings
