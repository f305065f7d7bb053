"""
Exception hierarchy for pm-glmm.

User-facing errors (bad data, bad configuration, out-of-domain parameters) derive from
ValueError as well so callers can catch them generically. Numerical failures carry the
diagnostics needed to understand where an iteration stopped.
"""
from typing import Any, List, Optional, Sequence


class GlmmError(Exception):
    """Base class for all pm-glmm errors."""
    pass


class DomainError(GlmmError, ValueError):
    """A parameter or argument lies outside its admissible domain."""
    pass


class BudgetError(DomainError):
    """A quadrature or grid evaluation would exceed the configured node budget."""
    pass


class NotPositiveDefiniteError(GlmmError):
    """
    Cholesky factorization failed.

    Attributes:
        what: Name of the matrix being factorized (e.g. "R", "D")
        pivot: 1-based index of the first non-positive leading minor
    """

    def __init__(self, what: str, pivot: int):
        self.what = what
        self.pivot = pivot
        super().__init__(
            f"{what} is not positive definite: leading minor of order {pivot} "
            f"is not positive (pivot {pivot})"
        )


class ConvergenceError(GlmmError):
    """
    An iteration hit its cap without meeting its tolerance.

    Attributes:
        iterate: Last iterate reached (array or tuple of arrays)
        change: Max-norm change of the last step, or gradient norm
    """

    def __init__(self, message: str, iterate: Any = None, change: Optional[float] = None):
        self.iterate = iterate
        self.change = change
        super().__init__(message)


class MultiStartError(ConvergenceError):
    """Every start of a multi-start fit failed."""

    def __init__(self, failures: Sequence[str]):
        self.failures: List[str] = list(failures)
        joined = "; ".join(f"start {i}: {msg}" for i, msg in enumerate(self.failures))
        super().__init__(f"all {len(self.failures)} starts failed ({joined})")


class SingularInformationError(GlmmError):
    """
    The sample Fisher information is not positive definite.

    Attributes:
        null_directions: Eigenvectors (as columns) whose eigenvalues are not positive
    """

    def __init__(self, message: str, null_directions: Any = None):
        self.null_directions = null_directions
        super().__init__(message)


class DataError(GlmmError, ValueError):
    """
    Invalid dataset content.

    Attributes:
        row: 1-based data row (header excluded), if the problem is row-specific
        column: Column name, if the problem is column-specific
    """

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class ConfigError(GlmmError, ValueError):
    """
    Invalid configuration.

    Attributes:
        key_path: Dotted path of the offending key (e.g. "solver.outer_tol")
    """

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")
