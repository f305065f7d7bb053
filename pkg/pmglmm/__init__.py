"""
pm-glmm: exact maximum likelihood for generalized linear mixed models

The score equations of a canonical-link GLMM are solved by prediction–maximization:
random effects are predicted by the working-model fixed point, then a Gaussian working
objective ψ is maximized by damped Newton. Solutions are certified by brute-force
quadrature when the random-effect dimension is small.

- family: exponential-family functions, working response, GlmmData
- covariance: Matérn / exponential / scaled-identity D_ω and its derivatives
- objective: ψ with gradient and Hessian, Gaussian factorization identity check
- solver: PM iteration, multi-start selection
- inference: likelihood-ratio, score and generalized Wald tests, standard errors
- oracle: adaptive Gauss–Hermite marginal likelihood and exact score
- simulate: spatial data generation, oracle estimator, RMSE studies
- data / config / reports / cli: dataset ingestion, TOML configuration, JSON reports

Key Design Principles:
1. Every stacked vector ranges over β then the free ω components
2. All solves go through Cholesky factors; failures name the matrix and pivot
3. Step-halving keeps every iterate inside the ω domain
"""
from .covariance import (
    CovarianceKind,
    CovarianceSpec,
    bessel_K,
    build_D,
    d2D_domega2,
    dD_domega,
    validate_domain,
)
from .errors import (
    BudgetError,
    ConfigError,
    ConvergenceError,
    DataError,
    DomainError,
    GlmmError,
    MultiStartError,
    NotPositiveDefiniteError,
    SingularInformationError,
)
from .family import Family, GlmmData, eval_b, init_state, loglik_conditional, working_response
from .inference import (
    Restriction,
    TestKind,
    TestResult,
    chisq_sf,
    gw_stat,
    lr_stat,
    nested_tests,
    restriction_embed,
    sample_fisher,
    score_stat,
    std_errors,
)
from .models import COVARIANCES, FAMILIES, get_covariance_profile
from .objective import WorkingState, evaluate_psi, psi, psi_grad, psi_hess
from .oracle import QuadratureRule, certify, grid_argmax, marginal_loglik, marginal_score
from .simulate import (
    SimConfig,
    StudyResult,
    gen_response,
    gen_sites,
    oracle_estimate,
    run_study,
    sample_gp,
)
from .solver import (
    FitResult,
    SolverConfig,
    evaluate_at,
    fit,
    multistart_fit,
    predict_random_effects,
)
from .utils import ErrorHandlingStrategy

__version__ = "0.1.0"

__all__ = [
    # Families and data
    "Family",
    "GlmmData",
    "eval_b",
    "init_state",
    "loglik_conditional",
    "working_response",
    # Covariance
    "CovarianceKind",
    "CovarianceSpec",
    "bessel_K",
    "build_D",
    "dD_domega",
    "d2D_domega2",
    "validate_domain",
    # Working objective
    "WorkingState",
    "evaluate_psi",
    "psi",
    "psi_grad",
    "psi_hess",
    # Solver
    "FitResult",
    "SolverConfig",
    "evaluate_at",
    "fit",
    "multistart_fit",
    "predict_random_effects",
    # Inference
    "Restriction",
    "TestKind",
    "TestResult",
    "chisq_sf",
    "gw_stat",
    "lr_stat",
    "nested_tests",
    "restriction_embed",
    "sample_fisher",
    "score_stat",
    "std_errors",
    # Quadrature oracle
    "QuadratureRule",
    "certify",
    "grid_argmax",
    "marginal_loglik",
    "marginal_score",
    # Simulation
    "SimConfig",
    "StudyResult",
    "gen_response",
    "gen_sites",
    "oracle_estimate",
    "run_study",
    "sample_gp",
    # Errors and strategies
    "GlmmError",
    "DomainError",
    "BudgetError",
    "NotPositiveDefiniteError",
    "ConvergenceError",
    "MultiStartError",
    "SingularInformationError",
    "DataError",
    "ConfigError",
    "ErrorHandlingStrategy",
    # Profiles
    "COVARIANCES",
    "FAMILIES",
    "get_covariance_profile",
]
