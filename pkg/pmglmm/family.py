"""
Exponential-family machinery for canonical-link GLMMs.

Provides the cumulant function b(η) with its first two derivatives, the exact conditional
log-density, the working response/weights that linearize the model around η, and the
+0.5-corrected starting values for binomial-logit and Poisson-log data.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit, gammaln

from .errors import DataError
from .models import FAMILIES, resolve_family_name
from .typing import Matrix, Vector

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-10
EXP_CLIP = 700.0  # exp(700) is finite in float64


class Family(Enum):
    """Response family; the link is always canonical"""
    BINOMIAL = "binomial"  # logit link, b(η) = m log(1 + e^η)
    POISSON = "poisson"  # log link, b(η) = e^η

    @property
    def requires_trials(self) -> bool:
        return FAMILIES[self.value].requires_trials


def parse_family(value: Union[str, Family]) -> Family:
    """
    Parse a family from a string (name or alias) or enum.

    Example:
        >>> parse_family("poisson-log")
        <Family.POISSON: 'poisson'>
    """
    if isinstance(value, Family):
        return value
    return Family(resolve_family_name(value))


def _as_float_array(name: str, values: object, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1 and ndim == 2:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class GlmmData:
    """
    Observed GLMM problem instance.

    Attributes:
        y: Response counts (length n)
        X: Fixed-effects design (n×p), full column rank
        Z: Random-effects design (n×d), full column rank
        trials: Binomial trials m (length n), None for Poisson
        coords: Optional site coordinates (d×2) when D is spatial
        distances: Optional pairwise site distances (d×d)
        x_names: Column names of X, used in reports
    """
    y: Vector
    X: Matrix
    Z: Matrix
    trials: Optional[Vector] = None
    coords: Optional[Matrix] = field(default=None, compare=False)
    distances: Optional[Matrix] = field(default=None, compare=False)
    x_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        """Validate shapes, counts and ranks"""
        y = _as_float_array("y", self.y, 1)
        X = _as_float_array("X", self.X, 2)
        Z = _as_float_array("Z", self.Z, 2)
        n = y.shape[0]

        if X.shape[0] != n:
            raise DataError(f"X has {X.shape[0]} rows but y has length {n}")
        if Z.shape[0] != n:
            raise DataError(f"Z has {Z.shape[0]} rows but y has length {n}")

        bad = np.flatnonzero((y < 0) | (y != np.floor(y)))
        if bad.size:
            raise DataError(
                f"response must be a nonnegative integer, got {y[bad[0]]}", row=int(bad[0]) + 1
            )

        if self.trials is not None:
            m = _as_float_array("trials", self.trials, 1)
            if m.shape[0] != n:
                raise DataError(f"trials has length {m.shape[0]} but y has length {n}")
            bad = np.flatnonzero((m < 1) | (m != np.floor(m)))
            if bad.size:
                raise DataError(
                    f"trials must be a positive integer, got {m[bad[0]]}", row=int(bad[0]) + 1
                )
            object.__setattr__(self, "trials", m)

        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise DataError(f"X is rank deficient (p={X.shape[1]})")
        if np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise DataError(f"Z is rank deficient (d={Z.shape[1]})")

        if self.distances is not None:
            dist = np.asarray(self.distances, dtype=float)
            if dist.shape != (Z.shape[1], Z.shape[1]):
                raise DataError(
                    f"distances must be {Z.shape[1]}x{Z.shape[1]}, got {dist.shape}"
                )
            object.__setattr__(self, "distances", dist)

        names = tuple(self.x_names) or tuple(f"beta{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"x_names has {len(names)} entries but X has {X.shape[1]} columns")

        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "x_names", names)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def d(self) -> int:
        return int(self.Z.shape[1])

    @property
    def digest(self) -> str:
        """Content hash of the response (y, m); nested models fitted to the same responses share it"""
        h = hashlib.sha256()
        for arr in (self.y, self.trials):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
                h.update(str(arr.shape).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class WorkingVectors:
    """
    Linearization of the model around η.

    Attributes:
        eta: Linear predictor
        ytilde: Working response η + (y − b′(η))/b″(η)
        weights: Diagonal of W, b″(η) floored at WEIGHT_FLOOR
        clamped: Indices whose weight hit the floor
    """
    eta: Vector
    ytilde: Vector
    weights: Vector
    clamped: Tuple[int, ...] = ()

    @property
    def W(self) -> Matrix:
        return np.diag(self.weights)


def check_data(family: Family, data: GlmmData) -> None:
    """
    Family-specific validation of a dataset.

    Raises:
        DataError: binomial without trials, or y > m (naming the first offending row)
    """
    if family is Family.BINOMIAL:
        if data.trials is None:
            raise DataError("binomial family requires a trials vector", column="trials")
        bad = np.flatnonzero(data.y > data.trials)
        if bad.size:
            i = int(bad[0])
            raise DataError(
                f"response {data.y[i]:g} exceeds trials {data.trials[i]:g}", row=i + 1
            )


def eval_b(
    family: Family, m: Optional[np.ndarray], eta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cumulant function and its first two derivatives, elementwise.

    Args:
        family: Response family
        m: Binomial trials (broadcast against eta); ignored for Poisson
        eta: Linear predictor, any shape

    Returns:
        Tuple (b, b′, b″)

    Example:
        >>> eval_b(Family.POISSON, None, np.array([0.0]))
        (array([1.]), array([1.]), array([1.]))
    """
    eta = np.asarray(eta, dtype=float)
    if family is Family.BINOMIAL:
        if m is None:
            raise DataError("binomial family requires a trials vector", column="trials")
        p = expit(eta)
        b = m * np.logaddexp(0.0, eta)
        return b, m * p, m * p * expit(-eta)

    e = np.exp(np.minimum(eta, EXP_CLIP))
    return e, e, e


def working_response(family: Family, data: GlmmData, eta: np.ndarray) -> WorkingVectors:
    """
    Working response and weights at η.

    Weights below WEIGHT_FLOOR are clamped and their indices recorded.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != data.y.shape:
        raise ValueError(f"eta must have shape {data.y.shape}, got {eta.shape}")

    _, b1, b2 = eval_b(family, data.trials, eta)
    clamped = np.flatnonzero(b2 < WEIGHT_FLOOR)
    if clamped.size:
        logger.warning(f"Clamped {clamped.size} working weights at {WEIGHT_FLOOR:g}")
    weights = np.maximum(b2, WEIGHT_FLOOR)
    ytilde = eta + (data.y - b1) / weights
    return WorkingVectors(
        eta=eta, ytilde=ytilde, weights=weights, clamped=tuple(int(i) for i in clamped)
    )


def init_state(family: Family, data: GlmmData) -> WorkingVectors:
    """
    Starting linearization from the +0.5-corrected empirical link.

    binomial: η⁰ = log((y+0.5)/(m−y+0.5)), which gives w⁰ = m(y+0.5)(m−y+0.5)/(m+1)².
    poisson:  η⁰ = log(y+0.5), which gives w⁰ = y+0.5.
    """
    check_data(family, data)
    if family is Family.BINOMIAL:
        eta0 = np.log((data.y + 0.5) / (data.trials - data.y + 0.5))
    else:
        eta0 = np.log(data.y + 0.5)
    return working_response(family, data, eta0)


def log_normalizer(family: Family, data: GlmmData) -> float:
    """Σ c(yᵢ): log C(m, y) for binomial, −log y! for Poisson."""
    if family is Family.BINOMIAL:
        m, y = data.trials, data.y
        return float(np.sum(gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)))
    return float(-np.sum(gammaln(data.y + 1)))


def loglik_conditional(family: Family, data: GlmmData, eta: np.ndarray) -> Union[float, np.ndarray]:
    """
    Exact conditional log-density log f(y | η) = y⊤η − 1⊤b(η) + 1⊤c(y).

    eta may carry leading batch axes (shape (..., n)); the sum runs over the last axis.
    """
    eta = np.asarray(eta, dtype=float)
    b, _, _ = eval_b(family, data.trials, eta)
    value = np.sum(data.y * eta - b, axis=-1) + log_normalizer(family, data)
    if np.ndim(value) == 0:
        return float(value)
    return value
