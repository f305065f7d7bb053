"""
Nested-model tests and standard errors from the working objective.

Three statistics compare a full model M₂ with a reduced model M₁ given a restriction
matrix B (k₁×k₂) mapping the full model's stacked (β, free ω) to the reduced model's:

- lr: Λψ = 2[ψ_full(0,0) − ψ_reduced(0,0)]
- score: Sψ = −ψ̇⊤ ψ̈⁻¹ ψ̇ at the embedded point θ₂* = B*θ₁
- gwald: GWψ = −θ₂*⊤ ψ̈ θ₂* at the same point

All three are referred to χ² with k₂ − k₁ degrees of freedom.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Protocol, Tuple, Union

import numpy as np
from scipy.special import gammaincc

from .covariance import CovarianceSpec
from .errors import DataError, DomainError, NotPositiveDefiniteError, SingularInformationError
from .family import Family, GlmmData
from .solver import FitResult, SolverConfig, evaluate_at
from .typing import FloatSeq, Matrix, Vector
from .utils.linalg_utils import cholesky_or_raise, inverse, solve

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


class TestKind(Enum):
    """Nested-model test statistic"""
    __test__ = False

    LR = "lr"
    SCORE = "score"
    GWALD = "gwald"


@dataclass(frozen=True)
class TestResult:
    """Statistic value with its χ² reference"""
    __test__ = False

    kind: TestKind
    value: float
    df: int
    p: float
    warnings: Tuple[str, ...] = ()


class FitSummary(Protocol):
    """What lr_stat needs from a fit (a FitResult or a fit report read back from disk)."""
    psi0: float
    converged: bool
    data_digest: str

    @property
    def k(self) -> int: ...


@dataclass(frozen=True)
class Restriction:
    """
    Linear map from the full model's (β, free ω) to the reduced model's.

    Attributes:
        B: k₁×k₂ matrix of full row rank, k₁ < k₂
    """
    B: Matrix

    def __post_init__(self) -> None:
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.ndim != 2:
            raise DomainError(f"B must be a matrix, got shape {B.shape}")
        k1, k2 = B.shape
        if not k1 < k2:
            raise DomainError(f"B must have fewer rows than columns, got {k1}x{k2}")
        s = np.linalg.svd(B, compute_uv=False)
        if s[-1] <= RANK_TOL * s[0]:
            raise DomainError(f"B must have full row rank {k1}")
        object.__setattr__(self, "B", B)

    @property
    def k1(self) -> int:
        return int(self.B.shape[0])

    @property
    def k2(self) -> int:
        return int(self.B.shape[1])

    @property
    def df(self) -> int:
        return self.k2 - self.k1

    def embed(self, theta1: FloatSeq) -> Vector:
        return restriction_embed(self.B, theta1)


def load_restriction(path: Union[str, Path]) -> Restriction:
    """
    Read B from a headerless CSV (k₁ rows, k₂ columns).

    Raises:
        DataError: unparsable content
    """
    try:
        B = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise DataError(f"cannot parse restriction matrix {path}: {e}")
    return Restriction(B)


def chisq_sf(x: float, df: int) -> float:
    """
    Upper tail of χ²_df via the regularized upper incomplete gamma Q(df/2, x/2).

    Example:
        >>> round(chisq_sf(6.76, 1), 4)
        0.0093

    Raises:
        DomainError: x < 0 or df < 1
    """
    if df < 1 or int(df) != df:
        raise DomainError(f"df must be an integer >= 1, got {df}")
    if not x >= 0:
        raise DomainError(f"x must be non-negative, got {x}")
    return float(gammaincc(0.5 * df, 0.5 * x))


def _information_factor(hess: Matrix, what: str) -> Tuple[Matrix, Tuple[Matrix, bool]]:
    info = -0.5 * (hess + hess.T)
    try:
        return info, cholesky_or_raise(info, what)
    except NotPositiveDefiniteError:
        eigval, eigvec = np.linalg.eigh(info)
        tol = 1e-12 * max(1.0, float(np.max(np.abs(eigval))))
        null = eigvec[:, eigval <= tol]
        raise SingularInformationError(
            f"{what} is not positive definite ({null.shape[1]} null directions, "
            f"smallest eigenvalue {eigval[0]:.3g})",
            null_directions=null,
        )


def standard_errors_from_hessian(hess: Matrix) -> Vector:
    """
    sqrt(diag((−H)⁻¹)).

    Raises:
        SingularInformationError: −H not positive definite, listing null directions
    """
    _, chol = _information_factor(np.asarray(hess, dtype=float), "information")
    return np.sqrt(np.diag(inverse(chol)))


def sample_fisher(fit: FitResult) -> Matrix:
    """Iψ = −ψ̈(0,0) at the solution, symmetrized."""
    return -0.5 * (fit.hess + fit.hess.T)


def std_errors(fit: FitResult) -> Vector:
    """
    Standard errors ordered (β, ω); fixed ω components are NaN.

    Raises:
        SingularInformationError: Iψ not positive definite
    """
    se = np.full(fit.p + fit.spec.r, np.nan)
    index = list(range(fit.p)) + [fit.p + j for j in fit.spec.free_indices]
    se[index] = standard_errors_from_hessian(fit.hess)
    return se


def restriction_embed(B: Matrix, theta1: FloatSeq) -> Vector:
    """
    Minimum-norm θ₂* with Bθ₂* = θ₁, via B* = V D⁻¹ U⊤ from the thin SVD B = U D V⊤.

    Raises:
        DomainError: B rank deficient or θ₁ of the wrong length
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    theta1 = np.asarray(theta1, dtype=float)
    if theta1.shape != (B.shape[0],):
        raise DomainError(f"theta1 must have length {B.shape[0]}, got {theta1.shape}")
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    if s[-1] <= RANK_TOL * s[0]:
        raise DomainError(f"B must have full row rank {B.shape[0]}")
    return Vt.T @ ((U.T @ theta1) / s)


def lr_stat(fit_full: FitSummary, fit_reduced: FitSummary, df: Optional[int] = None) -> TestResult:
    """
    Λψ = 2[ψ_full(0,0) − ψ_reduced(0,0)].

    Negative values are reported as computed, with a warning and p = 1.

    Raises:
        DataError: the fits were computed on different data
    """
    if fit_full.data_digest != fit_reduced.data_digest:
        raise DataError("the full and reduced fits were computed on different data")
    df = fit_full.k - fit_reduced.k if df is None else df
    warnings: List[str] = []
    for name, f in (("full", fit_full), ("reduced", fit_reduced)):
        if not f.converged:
            warnings.append(f"{name} fit did not converge")
    value = 2.0 * (fit_full.psi0 - fit_reduced.psi0)
    if value < 0:
        warnings.append(f"negative likelihood-ratio statistic {value:.6g}")
    for message in warnings:
        logger.warning(message)
    p = 1.0 if value <= 0 else chisq_sf(value, df)
    return TestResult(TestKind.LR, value, int(df), p, tuple(warnings))


def score_from_derivatives(grad: Vector, hess: Matrix, df: int) -> TestResult:
    """Sψ = −g⊤H⁻¹g = g⊤(−H)⁻¹g, requiring −H positive definite."""
    _, chol = _information_factor(np.asarray(hess, dtype=float), "information at theta2*")
    value = float(grad @ solve(chol, grad))
    return TestResult(TestKind.SCORE, value, int(df), chisq_sf(max(value, 0.0), df))


def score_stat(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    theta2_star: FloatSeq,
    df: int,
    config: Optional[SolverConfig] = None,
) -> TestResult:
    """
    Score statistic at the embedded point θ₂* of the full model.

    γ̂ is predicted at θ₂* before ψ̇(0,0) and ψ̈(0,0) are evaluated.

    Raises:
        DomainError: θ₂*'s ω part outside the domain
        SingularInformationError: −ψ̈(0,0) not positive definite at θ₂*
    """
    ev, _ = evaluate_at(data, family, cov_spec, theta2_star, config)
    return score_from_derivatives(ev.grad, ev.hess, df)


def gw_stat(theta2_star: FloatSeq, hess_at_theta2_star: Matrix, df: int) -> TestResult:
    """
    Generalized Wald statistic GWψ = −θ₂*⊤ ψ̈(0,0) θ₂*.

    No hypothesized value is subtracted.

    Raises:
        SingularInformationError: −ψ̈(0,0) not positive definite
    """
    theta = np.asarray(theta2_star, dtype=float)
    info, _ = _information_factor(np.asarray(hess_at_theta2_star, dtype=float), "information at theta2*")
    value = float(theta @ info @ theta)
    return TestResult(TestKind.GWALD, value, int(df), chisq_sf(max(value, 0.0), df))


def nested_tests(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    fit_full: FitSummary,
    fit_reduced: FitSummary,
    theta1: FloatSeq,
    restriction: Restriction,
    config: Optional[SolverConfig] = None,
) -> List[TestResult]:
    """
    All three statistics for one nested pair; score and generalized Wald share a single
    evaluation at θ₂*.

    Args:
        cov_spec: Covariance model of the FULL fit
        theta1: Reduced-model estimates (β, free ω)
        restriction: Map from the full to the reduced parameterization
    """
    if restriction.k2 != fit_full.k or restriction.k1 != fit_reduced.k:
        raise DomainError(
            f"B is {restriction.k1}x{restriction.k2} but the fits have "
            f"{fit_reduced.k} and {fit_full.k} free parameters"
        )
    theta2_star = restriction.embed(theta1)
    ev, _ = evaluate_at(data, family, cov_spec, theta2_star, config)
    return [
        lr_stat(fit_full, fit_reduced, restriction.df),
        score_from_derivatives(ev.grad, ev.hess, restriction.df),
        gw_stat(theta2_star, ev.hess, restriction.df),
    ]
