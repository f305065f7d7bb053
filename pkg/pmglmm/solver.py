"""
Prediction–maximization solver for the GLMM score equations.

Each outer iteration linearizes the model at η = Xβ + Zγ̂, maximizes the Gaussian working
objective ψ over a perturbation (α, δ) of (β, ω), applies β ← β + α, ω ← ω + δ, and
re-predicts γ̂ by the working-model fixed point. The iteration stops when the perturbation
vanishes, which is exactly the condition ψ̇(0,0) = 0 at a self-consistent γ̂.

Inside each outer iteration α is profiled out in closed form (ψ is quadratic in α) and δ
is found by damped Newton: every trial step is halved until it stays inside the ω domain
and does not decrease ψ.
"""
import itertools
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np

if sys.version_info < (3, 11):
    from typing_extensions import Unpack
else:
    from typing import Unpack

from .covariance import CovarianceSpec, build_D, is_in_domain, validate_domain
from .errors import (
    ConvergenceError,
    DomainError,
    GlmmError,
    MultiStartError,
    NotPositiveDefiniteError,
    SingularInformationError,
)
from .family import (
    WEIGHT_FLOOR,
    Family,
    GlmmData,
    WorkingVectors,
    check_data,
    init_state,
    working_response,
)
from .models import get_covariance_profile
from .objective import (
    PsiEval,
    WorkingState,
    assemble_R,
    build_state,
    evaluate_psi,
    profile_alpha,
    psi,
)
from .typing import FloatSeq, Matrix, SolverOptions, Vector
from .utils.linalg_utils import cholesky_or_raise, solve
from .utils.logging_utils import format_vector
from .utils.strategy_utils import (
    ErrorHandlingStrategy,
    parse_error_handling,
    should_halve,
    step_scale,
)

logger = logging.getLogger(__name__)

PSI_SLACK = 1e-12  # relative tolerance on "ψ did not decrease"
STEP_FLOOR = 1e-12  # relative step size treated as converged


@dataclass
class SolverConfig:
    """
    Solver tolerances, iteration caps and multi-start settings.

    Attributes:
        outer_tol: Max-norm of the (α, δ) step that ends the outer iteration
        inner_tol: Max-norm change of γ̂ that ends the prediction loop
        newton_tol: Max-norm of ∂ψ/∂δ that ends the inner Newton loop
        grad_tol: Absolute bound on ‖ψ̇(0,0)‖∞ required, together with outer_tol, for a fit
                  to count as converged; the outer loop keeps going until both hold
        max_outer: Outer iteration cap
        max_inner: Prediction-loop cap
        max_newton: Inner Newton cap
        damping: Maximum step halvings per Newton step
        omega_init: Starting ω (full length r); defaults to the covariance spec's ω
        starts: Starting ω values for multi-start; defaults to the kind's grid
        seed: Seed for multiplicative start jitter
        start_jitter: Log-scale standard deviation of start jitter (0 disables it)
        threads: Worker threads for multi-start
        error_handling: What a failed start does to a multi-start fit
        keep_trace: Record per-iteration trace entries
    """
    outer_tol: float = 1e-8
    inner_tol: float = 1e-10
    newton_tol: float = 1e-10
    grad_tol: float = 1e-8
    max_outer: int = 100
    max_inner: int = 200
    max_newton: int = 50
    damping: int = 30
    omega_init: Optional[Tuple[float, ...]] = None
    starts: Optional[List[Tuple[float, ...]]] = None
    seed: int = 0
    start_jitter: float = 0.0
    threads: int = 1
    error_handling: ErrorHandlingStrategy = ErrorHandlingStrategy.RECORD_AND_CONTINUE
    keep_trace: bool = True

    def __post_init__(self) -> None:
        """Validate configuration after initialization"""
        self.error_handling = parse_error_handling(self.error_handling)

        for name in ("outer_tol", "inner_tol", "newton_tol", "grad_tol"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")

        for name in ("max_outer", "max_inner", "max_newton", "damping", "threads"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value}")

        if self.start_jitter < 0:
            raise ValueError(f"start_jitter must be non-negative, got {self.start_jitter}")

        if self.omega_init is not None:
            self.omega_init = tuple(float(w) for w in self.omega_init)

        if self.starts is not None:
            if len(self.starts) == 0:
                raise ValueError("starts must be non-empty when given")
            self.starts = [tuple(float(w) for w in s) for s in self.starts]

    @classmethod
    def from_options(cls, **options: Unpack[SolverOptions]) -> "SolverConfig":
        """Build from a [solver] option table"""
        return cls(**options)  # type: ignore[arg-type]


@dataclass(frozen=True)
class TraceEntry:
    """State after one outer iteration; psi is ψ at the accepted inner step"""
    iteration: int
    beta: Tuple[float, ...]
    omega: Tuple[float, ...]
    psi: float
    step_norm: float
    grad_norm: float


@dataclass(frozen=True)
class InnerSolution:
    """Maximizer of ψ around one WorkingState"""
    alpha: Vector
    delta: Vector
    psi: float
    psi_start: float
    iterations: int
    halvings: int


@dataclass(frozen=True)
class _Iterate:
    iteration: int
    beta: Vector
    spec: CovarianceSpec
    gammahat: Vector
    work: WorkingVectors
    ev: PsiEval
    grad_norm: float


@dataclass(frozen=True)
class FitResult:
    """
    Estimates at a solution of the score equations.

    Attributes:
        beta: Fixed-effect estimates
        omega: Hyperparameter estimates (fixed components included)
        gammahat: Predicted random effects at the solution
        psi0: ψ(0,0) at the solution
        grad: ψ̇(0,0) over (β, free ω)
        grad_norm: ‖ψ̇(0,0)‖∞
        hess: ψ̈(0,0) over (β, free ω)
        se: Standard errors for (β, ω); NaN for fixed ω components or singular information
        iterations: Outer iterations performed
        converged: Step and gradient tolerances both met
        trace: Per-iteration trace
        warnings: Weight clamps, damping events, convergence problems
        family: Response family
        spec: Covariance model at the solution
        parameter_names: Names of (β, ω) entries
        data_digest: Content hash of the data the fit used
    """
    beta: Vector
    omega: Vector
    gammahat: Vector
    psi0: float
    grad: Vector
    grad_norm: float
    hess: Matrix
    se: Vector
    iterations: int
    converged: bool
    trace: Tuple[TraceEntry, ...]
    warnings: Tuple[str, ...]
    family: Family
    spec: CovarianceSpec = field(repr=False)
    parameter_names: Tuple[str, ...] = ()
    data_digest: str = ""

    @property
    def p(self) -> int:
        return int(self.beta.shape[0])

    @property
    def free_mask(self) -> Tuple[bool, ...]:
        """True for every entry of (β, ω) that was estimated"""
        return (True,) * self.p + tuple(not f for f in self.spec.fixed_mask)

    @property
    def theta(self) -> Vector:
        """Stacked free parameters (β, free ω)"""
        return np.concatenate([self.beta, self.omega[list(self.spec.free_indices)]])

    @property
    def k(self) -> int:
        return self.p + self.spec.r_free


def _omega_full(cov_spec: CovarianceSpec, values: FloatSeq) -> Vector:
    """Accept either a full-length ω or only its free components."""
    arr = np.asarray(values, dtype=float)
    if arr.shape == (cov_spec.r,):
        return arr.copy()
    if arr.shape == (cov_spec.r_free,):
        return cov_spec.with_free(arr).omega_array()
    raise DomainError(
        f"omega must have length {cov_spec.r} (or {cov_spec.r_free} free components), "
        f"got {arr.shape[0] if arr.ndim else 1}"
    )


def _check_dimensions(data: GlmmData, cov_spec: CovarianceSpec) -> None:
    if cov_spec.dim != data.d:
        raise DomainError(f"covariance dimension {cov_spec.dim} does not match Z with d={data.d}")


def predict_random_effects(
    beta: Vector,
    omega: FloatSeq,
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    init_work: WorkingVectors,
    config: Optional[SolverConfig] = None,
) -> Tuple[Vector, WorkingVectors]:
    """
    Working-model fixed point for γ̂ at (β, ω).

    Iterates γ̂ ← D Z⊤R⁻¹(ỹ − Xβ) with (ỹ, W) refreshed at η = Xβ + Zγ̂ until the max-norm
    change of γ̂ drops below inner_tol. The fixed point is the joint mode of
    log f(y|γ) + log φ(γ; 0, D).

    Returns:
        Tuple (γ̂, working vectors at Xβ + Zγ̂)

    Raises:
        ConvergenceError: after max_inner iterations, carrying the last γ̂ and change
    """
    config = config or SolverConfig()
    beta = np.asarray(beta, dtype=float)
    spec = cov_spec.with_omega(omega)
    D = build_D(spec)
    xb = data.X @ beta
    work = init_work
    gamma: Optional[Vector] = None
    change = np.inf

    for _ in range(config.max_inner):
        _, chol = assemble_R(work, data.Z, D)
        new = D @ (data.Z.T @ solve(chol, work.ytilde - xb))
        if not np.all(np.isfinite(new)):
            raise ConvergenceError("random-effect prediction diverged", iterate=gamma, change=change)
        work = working_response(family, data, xb + data.Z @ new)
        if gamma is not None:
            change = float(np.max(np.abs(new - gamma)))
        gamma = new
        if change < config.inner_tol:
            return gamma, work

    raise ConvergenceError(
        f"random-effect prediction did not converge in {config.max_inner} iterations "
        f"(last change {change:.3g})",
        iterate=gamma,
        change=change,
    )


def ascent_direction(hess: Matrix, grad: Vector) -> Vector:
    """Newton direction −H⁻¹g, with |eigenvalues| when −H is not positive definite."""
    try:
        return solve(cholesky_or_raise(-hess, "-H"), grad)
    except NotPositiveDefiniteError:
        eigval, eigvec = np.linalg.eigh(-hess)
        floor = 1e-8 * max(1.0, float(np.max(np.abs(eigval))))
        eigval = np.maximum(np.abs(eigval), floor)
        return eigvec @ ((eigvec.T @ grad) / eigval)


def solve_inner(state: WorkingState, config: Optional[SolverConfig] = None) -> InnerSolution:
    """
    Maximize ψ(α, δ) around a WorkingState.

    α is profiled out exactly; δ follows damped Newton on the profiled objective, whose
    Hessian is the Schur complement H_δδ − H_δα H_αα⁻¹ H_αδ.

    Raises:
        ConvergenceError: no admissible step after `damping` halvings, or max_newton exceeded
    """
    config = config or SolverConfig()
    p, k = state.p, state.r_free
    kind = state.spec.kind
    omega_free = state.spec.free_values()
    floor = STEP_FLOOR * max(1.0, float(np.max(np.abs(omega_free), initial=0.0)))

    delta = np.zeros(k)
    psi_start = psi(state)
    alpha = profile_alpha(state, delta)
    value = psi(state, alpha, delta)
    if k == 0:
        return InnerSolution(alpha, delta, value, psi_start, 0, 0)

    halvings = 0
    for iteration in range(1, config.max_newton + 1):
        ev = evaluate_psi(state, alpha, delta)
        g = ev.grad[p:]
        if np.max(np.abs(g)) <= config.newton_tol:
            return InnerSolution(alpha, delta, value, psi_start, iteration - 1, halvings)

        H = ev.hess
        profiled = H[p:, p:] - H[p:, :p] @ np.linalg.solve(H[:p, :p], H[:p, p:])
        step = ascent_direction(0.5 * (profiled + profiled.T), g)

        attempt = 0
        accepted = False
        while True:
            trial = step_scale(attempt) * step
            candidate = delta + trial
            tiny = float(np.max(np.abs(trial))) <= floor
            if is_in_domain(kind, state.spec.with_free(omega_free + candidate).omega):
                try:
                    cand_alpha = profile_alpha(state, candidate)
                    cand_value = psi(state, cand_alpha, candidate)
                except NotPositiveDefiniteError:
                    cand_value = -np.inf
                slack = PSI_SLACK * max(1.0, abs(value))
                if np.isfinite(cand_value) and (cand_value >= value - slack or tiny):
                    accepted = True
                    break
            if not should_halve(attempt, config.damping):
                break
            attempt += 1

        halvings += attempt
        if attempt:
            logger.debug(f"Newton step halved {attempt} times at inner iteration {iteration}")
        if not accepted:
            raise ConvergenceError(
                f"no admissible hyperparameter step after {config.damping} halvings",
                iterate=(alpha, delta),
                change=float(np.max(np.abs(g))),
            )

        alpha, delta, value = cand_alpha, candidate, cand_value
        if tiny:
            return InnerSolution(alpha, delta, value, psi_start, iteration, halvings)

    raise ConvergenceError(
        f"inner Newton did not converge in {config.max_newton} iterations",
        iterate=(alpha, delta),
        change=float(np.max(np.abs(evaluate_psi(state, alpha, delta).grad[p:]))),
    )


def _standard_errors(hess: Matrix, spec: CovarianceSpec, p: int, warnings: List[str]) -> Vector:
    from .inference import standard_errors_from_hessian

    se = np.full(p + spec.r, np.nan)
    index = list(range(p)) + [p + j for j in spec.free_indices]
    try:
        se[index] = standard_errors_from_hessian(hess)
    except SingularInformationError as e:
        warnings.append(f"standard errors unavailable: {e}")
    return se


def fit(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    config: Optional[SolverConfig] = None,
    initial: Optional[Tuple[FloatSeq, FloatSeq]] = None,
) -> FitResult:
    """
    Solve the score equations by prediction–maximization.

    Args:
        data: Problem instance
        family: Response family
        cov_spec: Covariance model; its ω is the default starting point
        config: Solver settings
        initial: Optional (β, ω) warm start; skips the initialization linearization

    Returns:
        FitResult; if max_outer is reached `converged` is False (with a warning) and the
        iterate with the smallest gradient norm is returned

    Raises:
        DomainError, NotPositiveDefiniteError, ConvergenceError: from the inner solves
    """
    config = config or SolverConfig()
    check_data(family, data)
    _check_dimensions(data, cov_spec)
    warnings: List[str] = []
    trace: List[TraceEntry] = []
    halvings = 0

    work0 = init_state(family, data)
    if initial is None:
        omega0 = _omega_full(cov_spec, config.omega_init or cov_spec.omega)
        spec = cov_spec.with_omega(omega0)
        validate_domain(spec)
        start = solve_inner(build_state(data, spec, np.zeros(data.p), work0), config)
        halvings += start.halvings
        beta = start.alpha
        spec = spec.with_free(spec.free_values() + start.delta)
        logger.info(
            f"Initial solve: beta={format_vector(beta)}, omega={format_vector(spec.omega)}"
        )
    else:
        beta = np.asarray(initial[0], dtype=float)
        spec = cov_spec.with_omega(_omega_full(cov_spec, initial[1]))
        validate_domain(spec)

    gammahat, work = predict_random_effects(beta, spec.omega, data, family, spec, work0, config)

    converged = False
    iterations = 0
    step = np.inf
    best: Optional[_Iterate] = None
    current: Optional[_Iterate] = None
    for iterations in range(1, config.max_outer + 1):
        state = build_state(data, spec, beta, work, gammahat)
        sol = solve_inner(state, config)
        halvings += sol.halvings
        step = float(np.max(np.abs(np.concatenate([sol.alpha, sol.delta]))))

        beta = beta + sol.alpha
        spec = spec.with_free(spec.free_values() + sol.delta)
        gammahat, work = predict_random_effects(beta, spec.omega, data, family, spec, work, config)
        ev = evaluate_psi(build_state(data, spec, beta, work, gammahat))
        current = _Iterate(
            iterations, beta, spec, gammahat, work, ev, float(np.max(np.abs(ev.grad)))
        )
        if best is None or current.grad_norm < best.grad_norm:
            best = current

        if config.keep_trace:
            trace.append(
                TraceEntry(
                    iterations, tuple(beta.tolist()), spec.omega, sol.psi, step, current.grad_norm
                )
            )
        logger.info(
            f"Iteration {iterations}: beta={format_vector(beta)}, "
            f"omega={format_vector(spec.omega)}, step={step:.3g}, "
            f"grad={current.grad_norm:.3g}"
        )
        if step < config.outer_tol:
            if current.grad_norm < config.grad_tol:
                converged = True
                break
            logger.debug(
                f"Step below outer_tol but gradient norm {current.grad_norm:.3g} "
                f"exceeds {config.grad_tol:g}; continuing"
            )

    if not converged:
        warnings.append(
            f"did not converge in {config.max_outer} outer iterations (last step {step:.3g})"
        )
        assert best is not None and current is not None
        if best.iteration != current.iteration:
            warnings.append(
                f"returning iterate {best.iteration} with the smallest gradient norm "
                f"{best.grad_norm:.3g} (last {current.grad_norm:.3g})"
            )
            current = best

    assert current is not None
    beta, spec, gammahat, work, ev = (
        current.beta, current.spec, current.gammahat, current.work, current.ev
    )
    grad_norm = current.grad_norm
    if halvings:
        warnings.append(f"{halvings} step-halving events")
    if work.clamped:
        warnings.append(
            f"working weights clamped at {WEIGHT_FLOOR:g} for {len(work.clamped)} observations"
        )
    se = _standard_errors(ev.hess, spec, data.p, warnings)

    for message in warnings:
        logger.warning(message)

    return FitResult(
        beta=beta,
        omega=spec.omega_array(),
        gammahat=gammahat,
        psi0=ev.value,
        grad=ev.grad,
        grad_norm=grad_norm,
        hess=ev.hess,
        se=se,
        iterations=iterations,
        converged=converged,
        trace=tuple(trace),
        warnings=tuple(warnings),
        family=family,
        spec=spec,
        parameter_names=tuple(data.x_names) + spec.names,
        data_digest=data.digest,
    )


def evaluate_at(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    theta: FloatSeq,
    config: Optional[SolverConfig] = None,
) -> Tuple[PsiEval, WorkingState]:
    """
    ψ(0,0) with its derivatives at an arbitrary stacked point θ = (β, free ω).

    γ̂ is predicted at θ by the working-model fixed point before linearizing.

    Raises:
        DomainError: the ω part of θ is outside the domain (never clamped)
    """
    theta = np.asarray(theta, dtype=float)
    p = data.p
    if theta.shape != (p + cov_spec.r_free,):
        raise DomainError(
            f"theta must have length {p + cov_spec.r_free} (p + free omega), got {theta.shape}"
        )
    check_data(family, data)
    _check_dimensions(data, cov_spec)
    beta = theta[:p]
    spec = cov_spec.with_free(theta[p:])
    validate_domain(spec)
    gammahat, work = predict_random_effects(
        beta, spec.omega, data, family, spec, init_state(family, data), config
    )
    state = build_state(data, spec, beta, work, gammahat)
    return evaluate_psi(state), state


def default_starts(cov_spec: CovarianceSpec) -> List[Tuple[float, ...]]:
    """Cartesian grid of the kind's start values; fixed components keep their current value."""
    profile = get_covariance_profile(cov_spec.kind.value)
    axes = [
        (cov_spec.omega[j],) if cov_spec.fixed_mask[j] else profile.start_grid[j]
        for j in range(cov_spec.r)
    ]
    return [tuple(float(w) for w in point) for point in itertools.product(*axes)]


def _better(candidate: FitResult, incumbent: FitResult) -> bool:
    tol = 1e-10 * max(1.0, abs(incumbent.psi0))
    if candidate.psi0 > incumbent.psi0 + tol:
        return True
    return abs(candidate.psi0 - incumbent.psi0) <= tol and candidate.grad_norm < incumbent.grad_norm


def multistart_fit(
    data: GlmmData,
    family: Family,
    cov_spec: CovarianceSpec,
    config: Optional[SolverConfig] = None,
) -> FitResult:
    """
    Run `fit` from several starting ω and keep the converged solution with the largest
    ψ(0,0); ties go to the smaller gradient norm, then to the earlier start.

    Raises:
        MultiStartError: no start converged
    """
    config = config or SolverConfig()
    starts = config.starts or default_starts(cov_spec)
    rng = np.random.default_rng(config.seed)
    omegas: List[Vector] = []
    for s in starts:
        omega = _omega_full(cov_spec, s)
        if config.start_jitter > 0:
            free = list(cov_spec.free_indices)
            omega[free] *= np.exp(config.start_jitter * rng.standard_normal(len(free)))
        omegas.append(omega)

    def run(i: int) -> Union[FitResult, str]:
        start_config = replace(config, omega_init=tuple(omegas[i]), starts=None)
        try:
            result = fit(data, family, cov_spec, start_config)
        except GlmmError as e:
            if config.error_handling is ErrorHandlingStrategy.FAIL_FAST:
                raise
            logger.error(f"Start {i} failed: {e}")
            return str(e)
        logger.info(
            f"Start {i} (omega={format_vector(omegas[i])}): psi0={result.psi0:.10g}, "
            f"converged={result.converged}"
        )
        return result

    if config.threads > 1 and len(omegas) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(run, range(len(omegas))))
    else:
        outcomes = [run(i) for i in range(len(omegas))]

    converged = [o for o in outcomes if isinstance(o, FitResult) and o.converged]
    if not converged:
        raise MultiStartError(
            [o if isinstance(o, str) else "did not converge" for o in outcomes]
        )

    best = converged[0]
    for candidate in converged[1:]:
        if _better(candidate, best):
            best = candidate

    extra: List[str] = []
    for other in converged:
        same_value = abs(other.psi0 - best.psi0) <= 1e-8 * max(1.0, abs(best.psi0))
        if same_value and np.max(np.abs(other.theta - best.theta)) > 1e-6:
            extra.append("two starts reached equal psi0 at different estimates")
            break
    if extra:
        logger.warning(extra[0])
        best = replace(best, warnings=best.warnings + tuple(extra))
    return best
