"""
Shared fixtures: small grouped datasets with known structure and a spatial sample.
"""
import numpy as np
import pytest

from pmglmm.covariance import CovarianceKind, CovarianceSpec, build_D
from pmglmm.family import Family, GlmmData
from pmglmm.simulate import gen_response, gen_sites, sample_gp

GROUPED_COUNTS = [3, 5, 2, 4, 6, 12, 9, 15, 11, 13, 30, 26, 35, 28, 33]
GROUPED_SUCCESSES = [2, 3, 1, 4, 2, 8, 10, 9, 11, 7, 16, 17, 15, 18, 14]
GROUP_SIZE = 5
N_GROUPS = 3
TRIALS = 20


def grouped_design():
    """X = [1, x] with x in {-1, -0.5, 0, 0.5, 1} per group; Z = group indicators"""
    x = np.tile([-1.0, -0.5, 0.0, 0.5, 1.0], N_GROUPS)
    X = np.column_stack([np.ones(x.size), x])
    Z = np.kron(np.eye(N_GROUPS), np.ones((GROUP_SIZE, 1)))
    return X, Z


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def poisson_grouped():
    X, Z = grouped_design()
    return GlmmData(y=np.array(GROUPED_COUNTS, dtype=float), X=X, Z=Z, x_names=("intercept", "x"))


@pytest.fixture
def binomial_grouped():
    X, Z = grouped_design()
    return GlmmData(
        y=np.array(GROUPED_SUCCESSES, dtype=float),
        X=X,
        Z=Z,
        trials=np.full(len(GROUPED_SUCCESSES), float(TRIALS)),
        x_names=("intercept", "x"),
    )


@pytest.fixture
def identity_spec():
    return CovarianceSpec(CovarianceKind.SCALED_IDENTITY, (1.0,), dim=N_GROUPS)


@pytest.fixture
def spatial_poisson():
    """50 sites on [0, 10]², exponential-type Matérn, beta = (2, 1)"""
    rng = np.random.default_rng(7)
    sites = gen_sites(50, 10.0, rng)
    spec = CovarianceSpec(CovarianceKind.MATERN, (0.5, 1.0, 0.5), distances=sites.distances)
    gamma = sample_gp(build_D(spec), rng)
    X = np.column_stack([np.ones(50), rng.standard_normal(50)])
    y = gen_response(Family.POISSON, X @ np.array([2.0, 1.0]) + gamma, None, rng)
    data = GlmmData(y=y, X=X, Z=np.eye(50), coords=sites.coords, distances=sites.distances)
    return data, spec
