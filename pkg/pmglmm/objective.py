"""
Gaussian working-model objective ψ and its derivatives.

For a WorkingState built at (β, ω, γ̂) with frozen working response ỹ and weights W,

    ψ(α, δ) = log φ(ỹ; Xβ + Xα, R_δ),   R_δ = W⁻¹ + Z D_{ω+δ} Z⊤.

δ ranges over the FREE hyperparameters only. Every solve goes through the Cholesky factor
of R; traces tr(R⁻¹ Z A Z⊤) are reduced to tr(Z⊤R⁻¹Z A) so nothing n×n is ever inverted.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import multivariate_normal

from .covariance import CovarianceSpec, build_D, d2D_domega2, dD_domega, validate_domain
from .family import Family, GlmmData, WorkingVectors, working_response
from .typing import Matrix, Vector
from .utils.linalg_utils import CholeskyFactor, cholesky_or_raise, logdet, solve

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class WorkingState:
    """
    Solver iterate: current (β, ω, γ̂) with the quantities derived from them.

    Attributes:
        beta: Fixed effects (p)
        spec: Covariance model at the current ω
        work: Working vectors at η = Xβ + Zγ̂
        X: Fixed-effects design
        Z: Random-effects design
        D: Covariance at ω
        R: W⁻¹ + Z D Z⊤
        chol_R: Cholesky factor of R
        gammahat: Predicted random effects, None for the initial linearization
    """
    beta: Vector
    spec: CovarianceSpec
    work: WorkingVectors
    X: Matrix
    Z: Matrix
    D: Matrix
    R: Matrix
    chol_R: CholeskyFactor
    gammahat: Optional[Vector] = None

    @property
    def omega(self) -> Vector:
        return self.spec.omega_array()

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def r_free(self) -> int:
        return self.spec.r_free

    def residual(self, alpha: Optional[Vector] = None) -> Vector:
        """ỹ − Xβ − Xα"""
        resid = self.work.ytilde - self.X @ self.beta
        if alpha is not None:
            resid = resid - self.X @ alpha
        return resid


@dataclass(frozen=True)
class PsiEval:
    """
    ψ with its stacked gradient and Hessian over (α, δ_free).

    Attributes:
        value: ψ
        grad: (∂ψ/∂α, ∂ψ/∂δ), length p + r_free
        hess: Symmetric (p + r_free)×(p + r_free) Hessian
    """
    value: float
    grad: Vector
    hess: Matrix


def assemble_R(work: WorkingVectors, Z: Matrix, D: Matrix) -> Tuple[Matrix, CholeskyFactor]:
    """
    R = W⁻¹ + Z D Z⊤ and its Cholesky factor.

    Raises:
        NotPositiveDefiniteError: with the failing pivot index
    """
    R = Z @ D @ Z.T
    R[np.diag_indices_from(R)] += 1.0 / work.weights
    R = 0.5 * (R + R.T)
    return R, cholesky_or_raise(R, "R")


def build_state(
    data: GlmmData,
    spec: CovarianceSpec,
    beta: Vector,
    work: WorkingVectors,
    gammahat: Optional[Vector] = None,
) -> WorkingState:
    """Assemble a WorkingState around (β, ω) with the given working vectors."""
    D = build_D(spec)
    R, chol = assemble_R(work, data.Z, D)
    return WorkingState(
        beta=np.asarray(beta, dtype=float),
        spec=spec,
        work=work,
        X=data.X,
        Z=data.Z,
        D=D,
        R=R,
        chol_R=chol,
        gammahat=None if gammahat is None else np.asarray(gammahat, dtype=float),
    )


def state_at(
    data: GlmmData, family: Family, spec: CovarianceSpec, beta: Vector, gammahat: Vector
) -> WorkingState:
    """WorkingState with working vectors recomputed at η = Xβ + Zγ̂."""
    eta = data.X @ beta + data.Z @ gammahat
    return build_state(data, spec, beta, working_response(family, data, eta), gammahat)


@dataclass(frozen=True)
class _Pieces:
    spec: CovarianceSpec
    D: Matrix
    chol: CholeskyFactor
    resid: Vector
    u: Vector  # R⁻¹ resid
    A: Matrix  # Z⊤ R⁻¹ Z
    zu: Vector  # Z⊤ u


def _zero(n: int, value: Optional[Sequence[float]]) -> Vector:
    if value is None:
        return np.zeros(n)
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"expected a vector of length {n}, got shape {arr.shape}")
    return arr


def _pieces(state: WorkingState, alpha: Optional[Vector], delta: Optional[Vector]) -> _Pieces:
    alpha = _zero(state.p, alpha)
    delta = _zero(state.r_free, delta)
    if np.any(delta != 0):
        spec = state.spec.with_free(state.spec.free_values() + delta)
        validate_domain(spec)
        D = build_D(spec)
        _, chol = assemble_R(state.work, state.Z, D)
    else:
        spec, D, chol = state.spec, state.D, state.chol_R
    resid = state.residual(alpha)
    u = solve(chol, resid)
    A = state.Z.T @ solve(chol, state.Z)
    return _Pieces(spec=spec, D=D, chol=chol, resid=resid, u=u, A=0.5 * (A + A.T), zu=state.Z.T @ u)


def omega_derivatives(spec: CovarianceSpec) -> List[Matrix]:
    """∂D/∂ω_j for each free j, in free order."""
    return [dD_domega(spec, j) for j in spec.free_indices]


def omega_gradient(A: Matrix, zu: Vector, dDs: Sequence[Matrix]) -> Vector:
    """
    ∂/∂ω_j of a Gaussian log-density whose covariance depends on ω through Z D Z⊤:
    −½ tr(A D_j) + ½ zu⊤ D_j zu, with A = Z⊤R⁻¹Z and zu = Z⊤R⁻¹(residual).
    """
    return np.array(
        [-0.5 * np.sum(A * Dj) + 0.5 * zu @ Dj @ zu for Dj in dDs], dtype=float
    )


def omega_hessian(
    A: Matrix, zu: Vector, dDs: Sequence[Matrix], spec: CovarianceSpec
) -> Matrix:
    """Second derivatives matching omega_gradient, over the free components of spec."""
    free = spec.free_indices
    k = len(free)
    H = np.zeros((k, k))
    ADs = [A @ Dj for Dj in dDs]
    for a in range(k):
        for b in range(a, k):
            Dab = d2D_domega2(spec, free[a], free[b])
            value = (
                -0.5 * np.sum(A * Dab)
                + 0.5 * np.sum(ADs[a] * ADs[b].T)
                + 0.5 * zu @ Dab @ zu
                - zu @ dDs[a] @ ADs[b] @ zu
            )
            H[a, b] = H[b, a] = value
    return H


def _value(state: WorkingState, pc: _Pieces) -> float:
    n = state.X.shape[0]
    return float(-0.5 * (n * LOG_2PI + logdet(pc.chol) + pc.resid @ pc.u))


def _grad(state: WorkingState, pc: _Pieces, dDs: Sequence[Matrix]) -> Vector:
    g_alpha = state.X.T @ pc.u
    return np.concatenate([g_alpha, omega_gradient(pc.A, pc.zu, dDs)])


def _hess(state: WorkingState, pc: _Pieces, dDs: Sequence[Matrix]) -> Matrix:
    p, k = state.p, len(dDs)
    RinvX = solve(pc.chol, state.X)
    H = np.zeros((p + k, p + k))
    H[:p, :p] = -state.X.T @ RinvX
    ZtRinvX = state.Z.T @ RinvX
    for j, Dj in enumerate(dDs):
        H[:p, p + j] = -ZtRinvX.T @ (Dj @ pc.zu)
        H[p + j, :p] = H[:p, p + j]
    if k:
        H[p:, p:] = omega_hessian(pc.A, pc.zu, dDs, pc.spec)
    return 0.5 * (H + H.T)


def psi(state: WorkingState, alpha: Optional[Vector] = None, delta: Optional[Vector] = None) -> float:
    """
    ψ(α, δ) = log φ(ỹ; Xβ + Xα, R_δ).

    Raises:
        DomainError: ω + δ outside the domain
        NotPositiveDefiniteError: R_δ not factorizable
    """
    return _value(state, _pieces(state, alpha, delta))


def psi_grad(
    state: WorkingState, alpha: Optional[Vector] = None, delta: Optional[Vector] = None
) -> Vector:
    """Stacked gradient (X⊤R⁻¹res, −½tr(R⁻¹R_j) + ½res⊤R⁻¹R_jR⁻¹res)."""
    pc = _pieces(state, alpha, delta)
    return _grad(state, pc, omega_derivatives(pc.spec))


def psi_hess(
    state: WorkingState, alpha: Optional[Vector] = None, delta: Optional[Vector] = None
) -> Matrix:
    """Symmetrized Hessian of ψ over (α, δ_free)."""
    pc = _pieces(state, alpha, delta)
    return _hess(state, pc, omega_derivatives(pc.spec))


def evaluate_psi(
    state: WorkingState, alpha: Optional[Vector] = None, delta: Optional[Vector] = None
) -> PsiEval:
    """ψ, gradient and Hessian sharing one factorization."""
    pc = _pieces(state, alpha, delta)
    dDs = omega_derivatives(pc.spec)
    return PsiEval(value=_value(state, pc), grad=_grad(state, pc, dDs), hess=_hess(state, pc, dDs))


def profile_alpha(state: WorkingState, delta: Optional[Vector] = None) -> Vector:
    """
    Maximizer of ψ(·, δ): α(δ) = (X⊤R_δ⁻¹X)⁻¹ X⊤R_δ⁻¹ (ỹ − Xβ).
    """
    pc = _pieces(state, None, delta)
    RinvX = solve(pc.chol, state.X)
    gram = state.X.T @ RinvX
    return solve(cholesky_or_raise(0.5 * (gram + gram.T), "X'R^-1X"), state.X.T @ pc.u)


def posterior_moments(
    state: WorkingState, alpha: Optional[Vector] = None, delta: Optional[Vector] = None
) -> Tuple[Vector, Matrix]:
    """
    Working-model posterior of γ: v = D Z⊤R⁻¹(ỹ − Xβ − Xα), V = D − D Z⊤R⁻¹Z D.
    """
    pc = _pieces(state, alpha, delta)
    V = pc.D - pc.D @ pc.A @ pc.D
    return pc.D @ pc.zu, 0.5 * (V + V.T)


@dataclass(frozen=True)
class IdentityConfig:
    """Inputs of the Gaussian factorization identity check"""
    ytilde: Vector
    weights: Vector
    X: Matrix
    Z: Matrix
    D: Matrix
    beta: Vector
    alpha: Vector
    gamma: Vector


@dataclass(frozen=True)
class IdentityResiduals:
    """
    Residuals of the factorization

        log φ(ỹ; Xβ+Xα+Zγ, W⁻¹) + log φ(γ; 0, D) = log φ(γ; v, V) + log φ(ỹ; Xβ+Xα, R)

    Attributes:
        log_identity: |LHS − RHS| with both sides from dense density evaluations
        terms: Relative residuals of the four matched terms (log-determinants,
               quadratic in the residual, cross term, quadratic in γ)
        determinant: |det D·det W⁻¹ / (det V·det R) − 1|
    """
    log_identity: float
    terms: Tuple[float, float, float, float]
    determinant: float

    @property
    def max(self) -> float:
        return max(self.log_identity, self.determinant, *self.terms)


def random_identity_config(
    rng: np.random.Generator, n: int, d: int, p: int, family: Family = Family.POISSON
) -> IdentityConfig:
    """
    Random valid configuration whose (ỹ, W) come from a real linearization of `family`.
    """
    if not 1 <= d <= n or not 1 <= p <= n:
        raise ValueError(f"need 1 <= d <= n and 1 <= p <= n, got n={n}, d={d}, p={p}")
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    Z = rng.standard_normal((n, d))
    L = rng.standard_normal((d, d))
    D = L @ L.T / d + 0.5 * np.eye(d)
    eta = rng.standard_normal(n)
    if family is Family.BINOMIAL:
        m = rng.integers(1, 6, size=n).astype(float)
        y = rng.binomial(m.astype(int), 0.5).astype(float)
        data = GlmmData(y=y, X=X, Z=Z, trials=m)
    else:
        y = rng.poisson(2.0, size=n).astype(float)
        data = GlmmData(y=y, X=X, Z=Z)
    work = working_response(family, data, eta)
    return IdentityConfig(
        ytilde=work.ytilde,
        weights=work.weights,
        X=X,
        Z=Z,
        D=D,
        beta=rng.standard_normal(p),
        alpha=0.1 * rng.standard_normal(p),
        gamma=rng.standard_normal(d),
    )


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a))


def factorization_residual(config: IdentityConfig) -> IdentityResiduals:
    """
    Evaluate both sides of the Gaussian factorization identity independently, term by term.

    Uses explicit dense inverses and scipy's multivariate normal density so the check does
    not share code with the solver path.
    """
    c = config
    Winv = np.diag(1.0 / c.weights)
    W = np.diag(c.weights)
    mean = c.X @ (c.beta + c.alpha)
    r = c.ytilde - mean
    R = Winv + c.Z @ c.D @ c.Z.T
    Rinv = np.linalg.inv(R)
    v = c.D @ c.Z.T @ Rinv @ r
    V = c.D - c.D @ c.Z.T @ Rinv @ c.Z @ c.D
    V = 0.5 * (V + V.T)
    Vinv = np.linalg.inv(V)
    Dinv = np.linalg.inv(c.D)
    g = c.gamma

    lhs = multivariate_normal.logpdf(c.ytilde, mean + c.Z @ g, Winv) + multivariate_normal.logpdf(
        g, np.zeros_like(g), c.D
    )
    rhs = multivariate_normal.logpdf(g, v, V) + multivariate_normal.logpdf(c.ytilde, mean, R)

    def ld(M: Matrix) -> float:
        return float(np.linalg.slogdet(M)[1])

    t1, t1_ = -0.5 * (ld(Winv) + ld(c.D)), -0.5 * (ld(R) + ld(V))
    t2 = -0.5 * r @ W @ r
    t2_ = -0.5 * r @ (Rinv + Rinv @ c.Z @ c.D @ Vinv @ c.D @ c.Z.T @ Rinv) @ r
    t3, t3_ = g @ c.Z.T @ W @ r, g @ Vinv @ c.D @ c.Z.T @ Rinv @ r
    t4, t4_ = -0.5 * g @ (c.Z.T @ W @ c.Z + Dinv) @ g, -0.5 * g @ Vinv @ g

    det_ratio = np.exp(ld(c.D) + ld(Winv) - ld(V) - ld(R))
    return IdentityResiduals(
        log_identity=float(abs(lhs - rhs)),
        terms=(_rel(t1, t1_), _rel(t2, t2_), _rel(t3, t3_), _rel(t4, t4_)),
        determinant=float(abs(det_ratio - 1.0)),
    )
