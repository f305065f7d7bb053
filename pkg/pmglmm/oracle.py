"""
Brute-force marginal likelihood and score by adaptive Gauss–Hermite quadrature.

ℓ(β, ω) = log ∫ f(y|γ) φ(γ; 0, D_ω) dγ is integrated on a tensor-product Hermite grid.
With mode centering the grid is shifted to the joint mode γ̂ and scaled by the Cholesky
factor of (Z⊤WZ + D⁻¹)⁻¹ at the mode. All sums run in the log domain.

The score is computed from the same nodes as posterior expectations:

    ∂ℓ/∂β   = X⊤(y − E_q[b′(η)])
    ∂ℓ/∂ω_j = −½ tr(D⁻¹D_j) + ½ tr(D⁻¹D_jD⁻¹ E_q[γγ⊤])

Only feasible for small d; the node count grows as nodes_per_dim^d.
"""
import itertools
import logging
import sys
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

if sys.version_info < (3, 11):
    from typing_extensions import Unpack
else:
    from typing import Unpack

from .covariance import CovarianceSpec, build_D, is_in_domain, validate_domain
from .errors import BudgetError
from .family import Family, GlmmData, eval_b, init_state, loglik_conditional
from .objective import omega_derivatives
from .solver import FitResult, SolverConfig, predict_random_effects
from .typing import FloatSeq, Matrix, QuadratureOptions, Vector
from .utils.linalg_utils import cholesky_or_raise, inverse, logdet

logger = logging.getLogger(__name__)

MAX_DIM = 4
LOG_2PI = float(np.log(2.0 * np.pi))
NODE_DOUBLING_TOL = 1e-6


class Centering(Enum):
    """Where the Hermite grid is placed"""
    PRIOR = "prior"  # N(0, D)
    MODE = "mode"  # joint mode with Laplace scaling


@dataclass
class QuadratureRule:
    """
    Quadrature settings.

    Attributes:
        nodes_per_dim: Hermite nodes per random-effect dimension
        centering: Grid placement
        budget: Maximum total nodes (nodes_per_dim ** d)
        chunk_size: Nodes evaluated per vectorized block
        check_convergence: Re-evaluate with doubled nodes and warn on disagreement
        threshold: Score max-norm below which a fit counts as certified
    """
    nodes_per_dim: int = 40
    centering: Centering = Centering.MODE
    budget: int = 2_000_000
    chunk_size: int = 16_384
    check_convergence: bool = True
    threshold: float = 1e-4

    def __post_init__(self) -> None:
        """Validate configuration after initialization"""
        if isinstance(self.centering, str):
            try:
                self.centering = Centering(self.centering)
            except ValueError:
                raise ValueError(
                    f"Invalid centering: '{self.centering}'. "
                    f"Valid options: {[c.value for c in Centering]}"
                )
        if self.nodes_per_dim < 5:
            raise ValueError(f"nodes_per_dim must be >= 5, got {self.nodes_per_dim}")
        if self.budget < 1:
            raise ValueError(f"budget must be positive, got {self.budget}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be positive, got {self.chunk_size}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")

    @classmethod
    def from_options(cls, **options: Unpack[QuadratureOptions]) -> "QuadratureRule":
        """Build from an [oracle] option table"""
        return cls(**options)  # type: ignore[arg-type]


@dataclass(frozen=True)
class OracleEvaluation:
    """
    Quadrature result at one parameter point.

    Attributes:
        loglik: Marginal log-likelihood
        score: Gradient over (β, free ω)
        posterior_mean: E_q[γ]
        nodes: Total quadrature nodes used
        warnings: Node-doubling disagreements
    """
    loglik: float
    score: Vector
    posterior_mean: Vector
    nodes: int
    warnings: Tuple[str, ...] = ()

    @property
    def score_norm(self) -> float:
        return float(np.max(np.abs(self.score)))


def _hermite_grid(nodes_per_dim: int, d: int) -> Tuple[Matrix, Vector]:
    """Tensor-product nodes (k^d × d) and log(weight) + ‖x‖² per node."""
    x, w = hermgauss(nodes_per_dim)
    mesh = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    wmesh = np.meshgrid(*([np.log(w)] * d), indexing="ij")
    log_w = np.sum(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    return nodes, log_w + np.sum(nodes ** 2, axis=1)


def _check_budget(nodes_per_dim: int, d: int, budget: int) -> int:
    if d > MAX_DIM:
        raise BudgetError(f"quadrature supports d <= {MAX_DIM}, got d={d}")
    total = nodes_per_dim ** d
    if total > budget:
        raise BudgetError(
            f"{nodes_per_dim}^{d} = {total} nodes exceeds the budget of {budget}"
        )
    return total


def _grid_blocks(
    center: Vector, scale: Matrix, nodes_per_dim: int, chunk_size: int
) -> Iterator[Tuple[Matrix, Vector]]:
    """(γ, log weight) blocks of the grid mapped through γ = center + √2·scale·x."""
    nodes, log_w = _hermite_grid(nodes_per_dim, center.shape[0])
    root2L = np.sqrt(2.0) * scale
    for start in range(0, nodes.shape[0], chunk_size):
        yield center + nodes[start:start + chunk_size] @ root2L.T, log_w[start:start + chunk_size]


def _log_jacobian(scale: Matrix) -> float:
    return float(np.linalg.slogdet(np.sqrt(2.0) * scale)[1])


def gauss_hermite_log_integral(
    log_integrand: Callable[[Matrix], Vector],
    center: Vector,
    scale: Matrix,
    nodes_per_dim: int,
    budget: int = 2_000_000,
    chunk_size: int = 16_384,
) -> float:
    """
    log ∫ exp(g(γ)) dγ with γ = center + √2·scale·x on a Hermite product grid.

    Args:
        log_integrand: Maps an (m×d) block of points to m log-integrand values
        center: Grid center (d)
        scale: Lower-triangular scale matrix (d×d)
    """
    _check_budget(nodes_per_dim, center.shape[0], budget)
    parts = [
        log_w + log_integrand(gamma)
        for gamma, log_w in _grid_blocks(center, scale, nodes_per_dim, chunk_size)
    ]
    return float(logsumexp(np.concatenate(parts))) + _log_jacobian(scale)


def _log_prior(gamma: Matrix, chol_D: Tuple[Matrix, bool], logdet_D: float) -> Vector:
    z = solve_triangular(chol_D[0], gamma.T, lower=True, check_finite=False)
    d = gamma.shape[1]
    return -0.5 * (d * LOG_2PI + logdet_D + np.sum(z ** 2, axis=0))


def _integrate(
    data: GlmmData,
    family: Family,
    spec: CovarianceSpec,
    beta: Vector,
    rule: QuadratureRule,
    nodes_per_dim: int,
) -> Tuple[float, Vector, Vector, Matrix, int]:
    """Returns (loglik, E[b′(η)], E[γ], E[γγ⊤], node count)."""
    d = data.d
    total = _check_budget(nodes_per_dim, d, rule.budget)
    D = build_D(spec)
    chol_D = cholesky_or_raise(D, "D")
    logdet_D = logdet(chol_D)
    xb = data.X @ beta

    if rule.centering is Centering.MODE:
        center, work = predict_random_effects(
            beta, spec.omega, data, family, spec, init_state(family, data), SolverConfig()
        )
        H = data.Z.T @ (work.weights[:, None] * data.Z) + inverse(chol_D)
        posterior_cov = inverse(cholesky_or_raise(H, "posterior precision"))
        scale = cholesky_or_raise(posterior_cov, "posterior covariance")[0]
    else:
        center, scale = np.zeros(d), chol_D[0]

    def log_joint(gamma: Matrix) -> Vector:
        return loglik_conditional(family, data, xb + gamma @ data.Z.T) + _log_prior(
            gamma, chol_D, logdet_D
        )

    loglik = gauss_hermite_log_integral(
        log_joint, center, scale, nodes_per_dim, rule.budget, rule.chunk_size
    )
    log_norm = loglik - _log_jacobian(scale)

    mean_b1 = np.zeros(data.n)
    mean_g = np.zeros(d)
    mean_gg = np.zeros((d, d))
    for gamma, log_w in _grid_blocks(center, scale, nodes_per_dim, rule.chunk_size):
        w = np.exp(log_w + log_joint(gamma) - log_norm)
        _, b1, _ = eval_b(family, data.trials, xb + gamma @ data.Z.T)
        mean_b1 += w @ b1
        mean_g += w @ gamma
        mean_gg += (gamma * w[:, None]).T @ gamma

    return loglik, mean_b1, mean_g, mean_gg, total


def evaluate(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    beta: FloatSeq,
    omega: FloatSeq,
    rule: Optional[QuadratureRule] = None,
) -> OracleEvaluation:
    """
    Marginal log-likelihood and score at (β, ω).

    Raises:
        BudgetError: d > 4 or too many nodes
        DomainError: ω outside the domain
    """
    rule = rule or QuadratureRule()
    beta = np.asarray(beta, dtype=float)
    spec = cov_spec.with_omega(omega)
    validate_domain(spec)

    loglik, mean_b1, mean_g, mean_gg, total = _integrate(
        data, family, spec, beta, rule, rule.nodes_per_dim
    )

    warnings: List[str] = []
    if rule.check_convergence:
        doubled = 2 * rule.nodes_per_dim
        if doubled ** data.d <= rule.budget:
            loglik2 = _integrate(data, family, spec, beta, rule, doubled)[0]
            if abs(loglik2 - loglik) > NODE_DOUBLING_TOL:
                warnings.append(
                    f"doubling nodes to {doubled} changed the log-likelihood by "
                    f"{abs(loglik2 - loglik):.3g}"
                )
        else:
            warnings.append(f"node doubling check skipped: {doubled}^{data.d} exceeds budget")
    for message in warnings:
        logger.warning(message)

    score_beta = data.X.T @ (data.y - mean_b1)
    D = build_D(spec)
    Dinv = inverse(cholesky_or_raise(D, "D"))
    score_omega = []
    for Dj in omega_derivatives(spec):
        A = Dinv @ Dj @ Dinv
        score_omega.append(-0.5 * np.sum(Dinv * Dj) + 0.5 * np.sum(A * mean_gg))

    return OracleEvaluation(
        loglik=loglik,
        score=np.concatenate([score_beta, np.array(score_omega, dtype=float)]),
        posterior_mean=mean_g,
        nodes=total,
        warnings=tuple(warnings),
    )


def marginal_loglik(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    beta: FloatSeq,
    omega: FloatSeq,
    rule: Optional[QuadratureRule] = None,
) -> float:
    """log ∫ f(y|γ) φ(γ; 0, D_ω) dγ."""
    return evaluate(data, family, cov_spec, beta, omega, rule).loglik


def marginal_score(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    beta: FloatSeq,
    omega: FloatSeq,
    rule: Optional[QuadratureRule] = None,
) -> Vector:
    """Exact score over (β, free ω) from posterior expectations."""
    return evaluate(data, family, cov_spec, beta, omega, rule).score


def certify(fit: FitResult, data: GlmmData, rule: Optional[QuadratureRule] = None) -> OracleEvaluation:
    """Exact log-likelihood and score at a fitted solution."""
    return evaluate(data, fit.family, fit.spec, fit.beta, fit.omega, rule)


@dataclass(frozen=True)
class ParameterGrid:
    """
    Axes of an exhaustive search.

    Attributes:
        beta: One sequence of candidate values per β component
        omega: One sequence of candidate values per FREE ω component
        max_points: Refuse grids larger than this
    """
    beta: Sequence[Sequence[float]]
    omega: Sequence[Sequence[float]]
    max_points: int = 20_000

    @property
    def size(self) -> int:
        return int(np.prod([len(a) for a in list(self.beta) + list(self.omega)]))


@dataclass(frozen=True)
class GridMaximum:
    """Best grid point and its marginal log-likelihood"""
    beta: Vector
    omega: Vector
    loglik: float
    evaluated: int


def grid_argmax(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    grid: ParameterGrid,
    rule: Optional[QuadratureRule] = None,
) -> GridMaximum:
    """
    Evaluate the marginal log-likelihood on every grid point and return the maximizer.
    Points outside the ω domain are skipped; the first maximizer in grid order wins ties.

    Raises:
        BudgetError: the grid has more than max_points points
    """
    rule = rule or QuadratureRule()
    if len(grid.beta) != data.p or len(grid.omega) != cov_spec.r_free:
        raise ValueError(
            f"grid needs {data.p} beta axes and {cov_spec.r_free} omega axes, "
            f"got {len(grid.beta)} and {len(grid.omega)}"
        )
    if grid.size > grid.max_points:
        raise BudgetError(f"grid of {grid.size} points exceeds max_points={grid.max_points}")

    best: Optional[GridMaximum] = None
    evaluated = 0
    for point in itertools.product(*grid.beta, *grid.omega):
        beta = np.array(point[:data.p], dtype=float)
        omega = cov_spec.with_free(point[data.p:]).omega_array()
        if not is_in_domain(cov_spec.kind, omega):
            continue
        value = marginal_loglik(data, family, cov_spec, beta, omega, rule)
        evaluated += 1
        if best is None or value > best.loglik:
            best = GridMaximum(beta=beta, omega=omega, loglik=value, evaluated=0)

    if best is None:
        raise ValueError("no grid point lies inside the hyperparameter domain")
    logger.info(f"Grid search evaluated {evaluated} points, max loglik {best.loglik:.10g}")
    return GridMaximum(beta=best.beta, omega=best.omega, loglik=best.loglik, evaluated=evaluated)
