"""
Logging helpers: handler setup for the CLI and compact rendering of arrays and configs.
"""
import logging
from typing import Any, Dict, Sequence, Union

import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MAX_LOGGED_ITEMS = 8


def configure_logging(level: Union[int, str] = logging.WARNING) -> None:
    """
    Configure the root logger for command-line use (stderr handler).

    Library modules never call this; they only create module loggers.
    """
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            raise ValueError(
                f"Invalid log level: '{level}'. "
                f"Valid options: {['DEBUG', 'INFO', 'WARNING', 'ERROR']}"
            )
        level = resolved
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def format_vector(values: Union[Sequence[float], np.ndarray], precision: int = 6) -> str:
    """
    Render a vector compactly for a log line.

    Example:
        >>> format_vector([1.0, 0.25])
        '[1, 0.25]'
    """
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    shown = [f"{v:.{precision}g}" for v in arr[:MAX_LOGGED_ITEMS]]
    if arr.size > MAX_LOGGED_ITEMS:
        shown.append(f"... ({arr.size} total)")
    return "[" + ", ".join(shown) + "]"


def summarize_config(data: Dict[str, Any]) -> Dict[str, Any]:
    """
    Shorten a configuration mapping for logging: long lists are truncated, nested
    tables are summarized recursively.

    Example:
        >>> summarize_config({'starts': [[1], [2], [3], [4], [5], [6], [7], [8], [9]]})
        {'starts': '<9 items>'}
    """
    summarized: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            summarized[key] = summarize_config(value)
        elif isinstance(value, (list, tuple)) and len(value) > MAX_LOGGED_ITEMS:
            summarized[key] = f"<{len(value)} items>"
        else:
            summarized[key] = value
    return summarized
