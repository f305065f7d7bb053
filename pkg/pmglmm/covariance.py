"""
Random-effects covariance D_ω.

Three kinds are supported:

- matern: [ω₁/(1−ω₁)]·(ω₂d)^ν / (2^{ν−1}Γ(ν))·K_ν(ω₂d) with ν = ω₃ (held at 0.5 by default)
- exponential: the ν = 0.5 member, [ω₁/(1−ω₁)]·exp(−ω₂d), with ω = (ω₁, ω₂)
- scaled-identity: ω₁·I

Derivatives with respect to ω₁ and ω₂ are analytic for every smoothness; only the
smoothness ω₃ is differentiated numerically.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaln, kv

from .errors import DomainError
from .models import get_covariance_profile
from .typing import FloatSeq, Matrix, Vector
from .utils.linalg_utils import cholesky_or_raise

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
FD_STEP_SECOND = 1e-4


class CovarianceKind(Enum):
    """Variance-component model"""
    MATERN = "matern"
    EXPONENTIAL = "exponential"
    SCALED_IDENTITY = "scaled-identity"


def parse_covariance_kind(value: Union[str, CovarianceKind]) -> CovarianceKind:
    """Parse a covariance kind from a string or enum, listing valid options on failure"""
    if isinstance(value, CovarianceKind):
        return value
    try:
        return CovarianceKind(value)
    except ValueError:
        raise ValueError(
            f"Invalid covariance kind: '{value}'. "
            f"Valid options: {[k.value for k in CovarianceKind]}"
        )


@dataclass(frozen=True)
class CovarianceSpec:
    """
    Covariance model with its current hyperparameters.

    Attributes:
        kind: Covariance kind (string values are converted)
        omega: Hyperparameters, length r (3 for matern, 2 for exponential, 1 otherwise)
        fixed_mask: True for components held constant; defaults to the kind's profile
        distances: Pairwise site distances (d×d), spatial kinds only
        jitter: Nonnegative constant added to the diagonal
        dim: Dimension d for scaled-identity; inferred from distances otherwise
    """
    kind: CovarianceKind
    omega: Tuple[float, ...]
    fixed_mask: Optional[Tuple[bool, ...]] = None
    distances: Optional[Matrix] = field(default=None, compare=False, repr=False)
    jitter: float = 0.0
    dim: Optional[int] = None

    def __post_init__(self) -> None:
        """Validate structure (not the ω domain; see validate_domain)"""
        kind = parse_covariance_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        profile = get_covariance_profile(kind.value)

        omega = tuple(float(w) for w in np.atleast_1d(np.asarray(self.omega, dtype=float)))
        r = len(profile.parameter_names)
        if len(omega) != r:
            raise DomainError(f"{kind.value} covariance needs {r} hyperparameters, got {len(omega)}")
        object.__setattr__(self, "omega", omega)

        mask = profile.default_fixed if self.fixed_mask is None else tuple(bool(b) for b in self.fixed_mask)
        if len(mask) != r:
            raise DomainError(f"fixed_mask must have length {r}, got {len(mask)}")
        object.__setattr__(self, "fixed_mask", mask)

        if self.jitter < 0:
            raise DomainError(f"jitter must be non-negative, got {self.jitter}")

        if profile.requires_distances:
            if self.distances is None:
                raise DomainError(f"{kind.value} covariance requires a distance matrix")
            dist = np.asarray(self.distances, dtype=float)
            _check_distances(dist, self.jitter)
            object.__setattr__(self, "distances", dist)
            object.__setattr__(self, "dim", dist.shape[0])
        elif self.dim is None or self.dim < 1:
            raise DomainError(f"scaled-identity covariance requires dim >= 1, got {self.dim}")

    @property
    def names(self) -> Tuple[str, ...]:
        return get_covariance_profile(self.kind.value).parameter_names

    @property
    def r(self) -> int:
        return len(self.omega)

    @property
    def free_indices(self) -> Tuple[int, ...]:
        return tuple(j for j, fixed in enumerate(self.fixed_mask) if not fixed)

    @property
    def r_free(self) -> int:
        return len(self.free_indices)

    @property
    def nu(self) -> float:
        """Matérn smoothness (0.5 for the exponential kind)"""
        if self.kind is CovarianceKind.MATERN:
            return self.omega[2]
        return 0.5

    def omega_array(self) -> Vector:
        return np.array(self.omega, dtype=float)

    def free_values(self) -> Vector:
        return self.omega_array()[list(self.free_indices)]

    def with_omega(self, omega: FloatSeq) -> "CovarianceSpec":
        return replace(self, omega=tuple(float(w) for w in omega))

    def with_free(self, values: FloatSeq) -> "CovarianceSpec":
        """Copy with the free components replaced by `values`"""
        omega = self.omega_array()
        omega[list(self.free_indices)] = np.asarray(values, dtype=float)
        return self.with_omega(omega)


def _check_distances(dist: Matrix, jitter: float) -> None:
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise DomainError(f"distances must be a square matrix, got shape {dist.shape}")
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise DomainError("distances must be finite and nonnegative")
    if not np.allclose(dist, dist.T, rtol=0.0, atol=1e-12 * max(1.0, float(dist.max(initial=0.0)))):
        raise DomainError("distances must be symmetric")
    if np.any(np.diag(dist) != 0):
        raise DomainError("distances must have a zero diagonal")
    off = ~np.eye(dist.shape[0], dtype=bool)
    if jitter == 0 and np.any(dist[off] == 0):
        i, j = np.argwhere((dist == 0) & off)[0]
        raise DomainError(
            f"sites {i} and {j} coincide (zero distance); set a positive jitter to allow ties"
        )


def domain_violation(kind: CovarianceKind, omega: Sequence[float]) -> Optional[str]:
    if not all(np.isfinite(omega)):
        return "omega must be finite"
    if kind is CovarianceKind.SCALED_IDENTITY:
        if omega[0] <= 0:
            return f"omega1 must be positive, got {omega[0]}"
        return None
    if not 0 < omega[0] < 1:
        return f"omega1 must be in (0,1), got {omega[0]}"
    if omega[1] <= 0:
        return f"omega2 must be positive, got {omega[1]}"
    if kind is CovarianceKind.MATERN and omega[2] <= 0:
        return f"omega3 must be positive, got {omega[2]}"
    return None


def is_in_domain(kind: CovarianceKind, omega: Sequence[float]) -> bool:
    """Non-raising domain test used by step-halving loops."""
    return domain_violation(kind, omega) is None


def validate_domain(spec: CovarianceSpec) -> None:
    """
    Check ω against the kind's domain.

    Raises:
        DomainError: naming the violated constraint, e.g. "omega1 must be in (0,1), got 1.2"
    """
    message = domain_violation(spec.kind, spec.omega)
    if message is not None:
        raise DomainError(message)


def _bessel_k_any(order: float, x: np.ndarray) -> np.ndarray:
    """K_order(x) for any real order, using K_{−μ} = K_μ."""
    order = abs(order)
    twice = 2.0 * order
    if twice == np.floor(twice) and int(twice) % 2 == 1:
        # 2ν odd: closed form seed plus upward recurrence
        k_prev = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x)
        if order == 0.5:
            return k_prev
        k_curr = k_prev * (1.0 + 1.0 / x)
        mu = 1.5
        while mu < order:
            k_prev, k_curr = k_curr, k_prev + (2.0 * mu / x) * k_curr
            mu += 1.0
        return k_curr
    return kv(order, x)


def bessel_K(nu: float, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Modified Bessel function of the second kind, K_ν(x).

    Half-integer orders use the closed form K_{1/2}(x) = √(π/2x)·e^{−x} and the recurrence
    K_{ν+1} = K_{ν−1} + (2ν/x)K_ν; other orders use scipy.special.kv.

    Raises:
        DomainError: nu <= 0 or any x <= 0
    """
    if nu <= 0:
        raise DomainError(f"nu must be positive, got {nu}")
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0):
        raise DomainError("x must be positive")
    value = _bessel_k_any(nu, arr)
    if np.ndim(value) == 0:
        return float(value)
    return value


def _xnu_k(nu: float, order: float, x: np.ndarray) -> np.ndarray:
    """x^ν·K_order(x) for x > 0."""
    return np.power(x, nu) * _bessel_k_any(order, x)


def _norm_const(nu: float) -> float:
    """1 / (2^{ν−1} Γ(ν))"""
    return float(np.exp(-(nu - 1.0) * np.log(2.0) - gammaln(nu)))


def _correlation(dist: Matrix, omega2: float, nu: float) -> Matrix:
    """Matérn correlation, 1 at d = 0."""
    x = omega2 * dist
    out = np.ones_like(dist)
    pos = x > 0
    if nu == 0.5:
        out[pos] = np.exp(-x[pos])
    else:
        out[pos] = _norm_const(nu) * _xnu_k(nu, nu, x[pos])
    return out


def _correlation_d_omega2(dist: Matrix, omega2: float, nu: float) -> Matrix:
    # d/dx [x^ν K_ν(x)] = −x^ν K_{ν−1}(x)
    x = omega2 * dist
    out = np.zeros_like(dist)
    pos = x > 0
    if nu == 0.5:
        out[pos] = -dist[pos] * np.exp(-x[pos])
    else:
        out[pos] = -_norm_const(nu) * dist[pos] * _xnu_k(nu, nu - 1.0, x[pos])
    return out


def _correlation_d2_omega2(dist: Matrix, omega2: float, nu: float) -> Matrix:
    # d²/dx² [x^ν K_ν(x)] = x^ν K_{ν−2}(x) − x^{ν−1} K_{ν−1}(x)
    x = omega2 * dist
    out = np.zeros_like(dist)
    pos = x > 0
    if nu == 0.5:
        out[pos] = dist[pos] ** 2 * np.exp(-x[pos])
    else:
        xp = x[pos]
        second = _xnu_k(nu, nu - 2.0, xp) - _xnu_k(nu - 1.0, nu - 1.0, xp)
        out[pos] = _norm_const(nu) * dist[pos] ** 2 * second
    return out


def _matern_cov(spec: CovarianceSpec, omega: Sequence[float]) -> Matrix:
    """Spatial covariance without jitter at an arbitrary ω (no domain check)."""
    nu = omega[2] if spec.kind is CovarianceKind.MATERN else 0.5
    scale = omega[0] / (1.0 - omega[0])
    return scale * _correlation(spec.distances, omega[1], nu)


def build_D(spec: CovarianceSpec, check: bool = True) -> Matrix:
    """
    Covariance matrix D_ω.

    Args:
        spec: Covariance model
        check: Attempt a Cholesky factorization and raise if it fails

    Raises:
        DomainError: ω outside the kind's domain
        NotPositiveDefiniteError: Cholesky failure, naming the pivot
    """
    validate_domain(spec)
    if spec.kind is CovarianceKind.SCALED_IDENTITY:
        D = (spec.omega[0] + spec.jitter) * np.eye(spec.dim)
    else:
        D = _matern_cov(spec, spec.omega)
        D[np.diag_indices_from(D)] += spec.jitter
    if check:
        cholesky_or_raise(D, "D")
    return D


def _check_index(spec: CovarianceSpec, j: int) -> None:
    if not 0 <= j < spec.r:
        raise DomainError(f"hyperparameter index {j} out of range for {spec.kind.value} (r={spec.r})")


def _fd_omega3(spec: CovarianceSpec, fn, step: float) -> Matrix:
    omega = spec.omega_array()
    h = step * max(1.0, abs(omega[2]))
    up, down = omega.copy(), omega.copy()
    up[2] += h
    down[2] -= h
    return (fn(spec.with_omega(up)) - fn(spec.with_omega(down))) / (2.0 * h)


def dD_domega(spec: CovarianceSpec, j: int) -> Matrix:
    """
    ∂D/∂ω_j (0-based j).

    Analytic for ω₁ and ω₂; central finite difference with step 1e−6·max(1,|ω₃|) for ω₃.
    """
    validate_domain(spec)
    _check_index(spec, j)
    if spec.kind is CovarianceKind.SCALED_IDENTITY:
        return np.eye(spec.dim)

    w1, w2 = spec.omega[0], spec.omega[1]
    if j == 0:
        return _correlation(spec.distances, w2, spec.nu) / (1.0 - w1) ** 2
    if j == 1:
        return (w1 / (1.0 - w1)) * _correlation_d_omega2(spec.distances, w2, spec.nu)
    return _fd_omega3(spec, lambda s: _matern_cov(s, s.omega), FD_STEP)


def d2D_domega2(spec: CovarianceSpec, j1: int, j2: int) -> Matrix:
    """
    ∂²D/∂ω_{j1}∂ω_{j2} (0-based, symmetric in the indices).

    Pairs involving ω₃ fall back to finite differences.
    """
    validate_domain(spec)
    _check_index(spec, j1)
    _check_index(spec, j2)
    if spec.kind is CovarianceKind.SCALED_IDENTITY:
        return np.zeros((spec.dim, spec.dim))

    a, b = sorted((j1, j2))
    w1, w2, nu = spec.omega[0], spec.omega[1], spec.nu
    dist = spec.distances
    if (a, b) == (0, 0):
        return 2.0 / (1.0 - w1) ** 3 * _correlation(dist, w2, nu)
    if (a, b) == (0, 1):
        return _correlation_d_omega2(dist, w2, nu) / (1.0 - w1) ** 2
    if (a, b) == (1, 1):
        return (w1 / (1.0 - w1)) * _correlation_d2_omega2(dist, w2, nu)
    if (a, b) == (2, 2):
        omega = spec.omega_array()
        h = FD_STEP_SECOND * max(1.0, abs(omega[2]))
        up, down = omega.copy(), omega.copy()
        up[2] += h
        down[2] -= h
        return (
            _matern_cov(spec, up) - 2.0 * _matern_cov(spec, omega) + _matern_cov(spec, down)
        ) / h ** 2
    return _fd_omega3(spec, lambda s: dD_domega(s, a), FD_STEP)
