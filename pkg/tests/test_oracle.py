"""
Tests for the quadrature oracle: marginal likelihood, exact score and grid search
"""
import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize
from scipy.stats import norm

from pmglmm.covariance import CovarianceKind, CovarianceSpec
from pmglmm.errors import BudgetError, DomainError
from pmglmm.family import Family, GlmmData, loglik_conditional
from pmglmm.oracle import (
    Centering,
    ParameterGrid,
    QuadratureRule,
    certify,
    evaluate,
    gauss_hermite_log_integral,
    grid_argmax,
    marginal_loglik,
    marginal_score,
)
from pmglmm.reports import oracle_report
from pmglmm.solver import fit


@pytest.fixture
def one_group():
    X = np.column_stack([np.ones(5), [-1.0, -0.5, 0.0, 0.5, 1.0]])
    data = GlmmData(y=[3.0, 5.0, 2.0, 4.0, 6.0], X=X, Z=np.ones((5, 1)))
    spec = CovarianceSpec(CovarianceKind.SCALED_IDENTITY, (0.5,), dim=1)
    return data, spec


def quad_loglik(data, beta, omega):
    """Reference marginal log-likelihood for a single scalar random effect"""
    def log_f(g):
        eta = data.X @ beta + g
        return loglik_conditional(Family.POISSON, data, eta) + norm.logpdf(g, 0.0, np.sqrt(omega))

    grid = np.linspace(-6.0, 6.0, 2401)
    values = np.array([log_f(g) for g in grid])
    shift = float(values.max())
    peak = float(grid[values.argmax()])
    integral, _ = quad(
        lambda g: np.exp(log_f(g) - shift), -6.0, 6.0, points=[peak],
        epsabs=0.0, epsrel=1e-12, limit=400,
    )
    return np.log(integral) + shift


def numeric_score(data, spec, beta, omega, rule, h=1e-5):
    theta = np.concatenate([beta, omega])
    p = beta.size
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (
            marginal_loglik(data, Family.POISSON, spec, up[:p], up[p:], rule)
            - marginal_loglik(data, Family.POISSON, spec, down[:p], down[p:], rule)
        ) / (2.0 * h)
    return grad


class TestQuadratureRule:
    """Tests for quadrature settings"""

    def test_defaults(self):
        """Test default settings"""
        rule = QuadratureRule()
        assert rule.nodes_per_dim == 40
        assert rule.centering is Centering.MODE
        assert rule.check_convergence

    def test_from_options(self):
        """Test string centering is parsed"""
        rule = QuadratureRule.from_options(centering="prior", nodes_per_dim=12)
        assert rule.centering is Centering.PRIOR
        assert rule.nodes_per_dim == 12

    def test_too_few_nodes(self):
        """Test a minimum node count is enforced"""
        with pytest.raises(ValueError, match="nodes_per_dim must be >= 5"):
            QuadratureRule(nodes_per_dim=4)

    def test_invalid_centering(self):
        """Test unknown centering lists valid options"""
        with pytest.raises(ValueError, match="Invalid centering"):
            QuadratureRule(centering="median")


class TestGaussHermite:
    """Tests for the generic log-domain Hermite integral"""

    def test_gaussian_is_exact(self):
        """Test a Gaussian integrand integrates exactly"""
        sigma = 0.5

        def log_integrand(points):
            return -0.5 * np.sum(points ** 2, axis=1) / sigma ** 2

        value = gauss_hermite_log_integral(log_integrand, np.zeros(2), sigma * np.eye(2), 10)
        assert value == pytest.approx(np.log(2.0 * np.pi) + 2.0 * np.log(sigma), rel=1e-12)

    def test_budget(self):
        """Test the node budget is enforced"""
        with pytest.raises(BudgetError, match="exceeds the budget"):
            gauss_hermite_log_integral(lambda g: np.zeros(len(g)), np.zeros(3), np.eye(3), 20, budget=1000)


class TestMarginalLikelihood:
    """Tests for the marginal log-likelihood"""

    def test_matches_adaptive_quadrature(self, one_group):
        """Test against scipy's adaptive quadrature for a scalar random effect"""
        data, spec = one_group
        beta = np.array([1.2, 0.2])
        expected = quad_loglik(data, beta, 0.5)
        assert marginal_loglik(data, Family.POISSON, spec, beta, (0.5,)) == pytest.approx(expected, rel=1e-9)

    def test_prior_centering_agrees(self, one_group):
        """Test prior-centred nodes approach the mode-centred value"""
        data, spec = one_group
        beta = np.array([1.2, 0.2])
        mode = marginal_loglik(data, Family.POISSON, spec, beta, (0.5,))
        prior = marginal_loglik(
            data, Family.POISSON, spec, beta, (0.5,), QuadratureRule(nodes_per_dim=100, centering="prior")
        )
        assert prior == pytest.approx(mode, abs=1e-3)

    def test_node_doubling_check(self, one_group):
        """Test the doubled-node check passes quietly on a smooth problem"""
        data, spec = one_group
        ev = evaluate(
            data, Family.POISSON, spec, [1.2, 0.2], (0.5,),
            QuadratureRule(nodes_per_dim=20, check_convergence=True),
        )
        assert ev.warnings == ()
        assert ev.nodes == 20

    def test_node_doubling_flags_coarse_grid(self, poisson_grouped, identity_spec):
        """Test a coarse prior-centred grid is flagged by the default doubling check"""
        rule = QuadratureRule(nodes_per_dim=5, centering="prior")
        assert rule.check_convergence
        ev = evaluate(poisson_grouped, Family.POISSON, identity_spec, [2.4, 0.1], (0.7,), rule)
        assert any("doubling nodes to 10" in w for w in ev.warnings)

    def test_node_doubling_skipped_over_budget(self, one_group):
        """Test the doubling check is skipped with a warning when it would exceed the budget"""
        data, spec = one_group
        ev = evaluate(
            data, Family.POISSON, spec, [1.2, 0.2], (0.5,), QuadratureRule(nodes_per_dim=30, budget=50)
        )
        assert ev.nodes == 30
        assert ev.warnings == ("node doubling check skipped: 60^1 exceeds budget",)

    def test_too_many_random_effects(self):
        """Test dimensions above four are refused"""
        rng = np.random.default_rng(0)
        data = GlmmData(y=rng.poisson(3.0, 10).astype(float), X=np.ones((10, 1)), Z=rng.standard_normal((10, 5)))
        spec = CovarianceSpec(CovarianceKind.SCALED_IDENTITY, (1.0,), dim=5)
        with pytest.raises(BudgetError, match="d <= 4"):
            marginal_loglik(data, Family.POISSON, spec, [1.0], (1.0,))

    def test_node_budget(self, poisson_grouped, identity_spec):
        """Test the total node budget is enforced"""
        with pytest.raises(BudgetError, match="exceeds the budget"):
            marginal_loglik(
                poisson_grouped, Family.POISSON, identity_spec, [2.0, 0.2], (1.0,),
                QuadratureRule(nodes_per_dim=200),
            )

    def test_out_of_domain(self, one_group):
        """Test out-of-domain hyperparameters are rejected"""
        data, spec = one_group
        with pytest.raises(DomainError, match="omega1 must be positive"):
            marginal_loglik(data, Family.POISSON, spec, [1.0, 0.0], (-0.5,))


class TestScore:
    """Tests for the exact score from posterior expectations"""

    def test_scalar_effect(self, one_group):
        """Test the score against differences of the log-likelihood"""
        data, spec = one_group
        beta, omega = np.array([1.2, 0.2]), np.array([0.5])
        rule = QuadratureRule()
        score = marginal_score(data, Family.POISSON, spec, beta, omega, rule)
        np.testing.assert_allclose(score, numeric_score(data, spec, beta, omega, rule), atol=1e-5)

    def test_grouped_effects(self, poisson_grouped, identity_spec):
        """Test the score for three grouped random effects"""
        beta, omega = np.array([2.2, 0.15]), np.array([0.8])
        rule = QuadratureRule(nodes_per_dim=20)
        score = marginal_score(poisson_grouped, Family.POISSON, identity_spec, beta, omega, rule)
        numeric = numeric_score(poisson_grouped, identity_spec, beta, omega, rule)
        np.testing.assert_allclose(score, numeric, rtol=1e-5, atol=1e-4)


class TestCertify:
    """Tests for certification of fitted solutions"""

    def test_fit_differs_from_exact_score_root(self, poisson_grouped, identity_spec):
        """Test the working-model fixed point misses the exact score root by a bounded gap"""
        result = fit(poisson_grouped, Family.POISSON, identity_spec)
        rule = QuadratureRule(nodes_per_dim=20)
        at_fit = certify(result, poisson_grouped, rule)
        report = oracle_report(at_fit, rule)
        assert at_fit.score.shape == (3,)
        assert at_fit.nodes == 20 ** 3
        assert report["threshold"] == 1e-4
        assert report["certified"] is False
        assert 0.01 < at_fit.score_norm < 0.1

        perturbed = evaluate(
            poisson_grouped, Family.POISSON, result.spec, result.beta + np.array([0.0, 0.5]),
            result.omega, rule,
        )
        assert at_fit.score_norm < 0.1 * perturbed.score_norm
        assert at_fit.loglik > perturbed.loglik

    def test_quadrature_optimum_is_a_score_root(self, poisson_grouped, identity_spec):
        """Test the direct maximizer of the marginal likelihood certifies near the fit"""
        result = fit(poisson_grouped, Family.POISSON, identity_spec)
        rule = QuadratureRule(nodes_per_dim=20, check_convergence=False)

        def negative_loglik(theta):
            if theta[2] <= 0:
                return np.inf
            return -marginal_loglik(
                poisson_grouped, Family.POISSON, identity_spec, theta[:2], theta[2:], rule
            )

        opt = minimize(
            negative_loglik, result.theta, method="Nelder-Mead",
            options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 4000, "maxfev": 8000},
        )
        optimum = evaluate(
            poisson_grouped, Family.POISSON, identity_spec, opt.x[:2], opt.x[2:], rule
        )
        assert optimum.score_norm < 1e-4
        assert oracle_report(optimum, rule)["certified"] is True
        assert optimum.loglik >= certify(result, poisson_grouped, rule).loglik
        gap = np.max(np.abs(opt.x - result.theta))
        assert 0.002 < gap < 0.05


class TestGridArgmax:
    """Tests for the exhaustive grid search"""

    def test_returns_best_point(self, one_group):
        """Test the maximizer over the grid, skipping out-of-domain points"""
        data, spec = one_group
        grid = ParameterGrid(beta=[[1.0, 1.2, 1.4], [0.0, 0.2]], omega=[[-0.5, 0.25, 0.5]])
        best = grid_argmax(data, Family.POISSON, spec, grid, QuadratureRule(nodes_per_dim=20))
        assert best.evaluated == 12
        values = [
            marginal_loglik(data, Family.POISSON, spec, [b0, b1], (w,), QuadratureRule(nodes_per_dim=20))
            for b0 in (1.0, 1.2, 1.4) for b1 in (0.0, 0.2) for w in (0.25, 0.5)
        ]
        assert best.loglik == pytest.approx(max(values), rel=1e-14)
        assert best.omega[0] in (0.25, 0.5)

    def test_axis_mismatch(self, one_group):
        """Test grid axes must match the parameters"""
        data, spec = one_group
        with pytest.raises(ValueError, match="grid needs 2 beta axes"):
            grid_argmax(data, Family.POISSON, spec, ParameterGrid(beta=[[1.0]], omega=[[0.5]]))

    def test_grid_too_large(self, one_group):
        """Test oversized grids are refused"""
        data, spec = one_group
        grid = ParameterGrid(beta=[[1.0, 1.2], [0.0, 0.2]], omega=[[0.25, 0.5]], max_points=5)
        with pytest.raises(BudgetError, match="exceeds max_points=5"):
            grid_argmax(data, Family.POISSON, spec, grid)
