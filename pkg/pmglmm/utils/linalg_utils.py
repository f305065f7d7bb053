"""
Dense linear-algebra guards shared by the covariance, objective and simulation modules.
"""
from typing import Tuple

import numpy as np
from scipy.linalg import cho_solve, lapack

from ..errors import NotPositiveDefiniteError
from ..typing import Matrix

CholeskyFactor = Tuple[Matrix, bool]


def cholesky_or_raise(matrix: Matrix, what: str = "matrix") -> CholeskyFactor:
    """
    Lower Cholesky factor of a symmetric matrix, in the (factor, lower) form cho_solve takes.

    Args:
        matrix: Symmetric matrix to factorize
        what: Name used in the error message

    Returns:
        Tuple (L, True) with L lower triangular

    Raises:
        NotPositiveDefiniteError: naming the first non-positive leading minor
    """
    factor, info = lapack.dpotrf(np.asarray(matrix, dtype=float), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(what, int(info))
    if info < 0:
        raise ValueError(f"illegal argument {-info} passed to dpotrf for {what}")
    return factor, True


def solve(chol: CholeskyFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs given the Cholesky factor of A."""
    return cho_solve(chol, rhs, check_finite=False)


def logdet(chol: CholeskyFactor) -> float:
    """log det A from its Cholesky factor."""
    return float(2.0 * np.sum(np.log(np.diag(chol[0]))))


def inverse(chol: CholeskyFactor) -> Matrix:
    """Explicit inverse from the Cholesky factor (small matrices only)."""
    n = chol[0].shape[0]
    inv = solve(chol, np.eye(n))
    return 0.5 * (inv + inv.T)
