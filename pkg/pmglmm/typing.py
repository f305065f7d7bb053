"""
Type definitions for pm-glmm
"""
from typing import Dict, List, Sequence, Tuple, TypedDict, Union

import numpy as np
import numpy.typing as npt


class SolverOptions(TypedDict, total=False):
    """Keys accepted by the [solver] configuration table"""
    outer_tol: float
    inner_tol: float
    newton_tol: float
    grad_tol: float
    max_outer: int
    max_inner: int
    max_newton: int
    damping: int
    omega_init: List[float]
    starts: List[List[float]]
    seed: int
    start_jitter: float
    threads: int
    error_handling: str
    keep_trace: bool


class CovarianceOptions(TypedDict, total=False):
    """Keys accepted by the [covariance] configuration table"""
    kind: str
    omega: List[float]
    fixed: List[bool]
    jitter: float


class SchemaOptions(TypedDict, total=False):
    """Keys accepted by the [data] configuration table"""
    response: str
    trials: str
    covariates: List[str]
    coordinates: List[str]
    z_columns: List[str]
    group: str
    delimiter: str
    intercept: bool
    scale: Dict[str, float]


class QuadratureOptions(TypedDict, total=False):
    """Keys accepted by the [oracle] configuration table"""
    nodes_per_dim: int
    centering: str
    budget: int
    chunk_size: int
    check_convergence: bool
    threshold: float


class SimulationOptions(TypedDict, total=False):
    """Keys accepted by the [simulation] configuration table"""
    n: int
    region: float
    beta_true: List[float]
    omega_true: List[float]
    omega3: float
    family: str
    trials: int
    replications: int
    seed: int
    methods: List[str]
    threads: int
    error_handling: str


# Type aliases
Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
FloatSeq = Union[Sequence[float], Vector]
ParameterPoint = Tuple[Vector, Vector]  # (beta, omega)
