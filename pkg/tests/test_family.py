"""
Tests for exponential-family functions, working vectors and GlmmData validation
"""
import logging

import numpy as np
import pytest
from scipy.stats import binom, poisson

from pmglmm.errors import DataError
from pmglmm.family import (
    WEIGHT_FLOOR,
    Family,
    GlmmData,
    check_data,
    eval_b,
    init_state,
    loglik_conditional,
    parse_family,
    working_response,
)


class TestEvalB:
    """Tests for the cumulant function and its derivatives"""

    def test_poisson_values(self):
        """Test b = b' = b'' = exp(eta) for Poisson"""
        b, b1, b2 = eval_b(Family.POISSON, None, np.array([0.0, np.log(2.0)]))
        np.testing.assert_allclose(b, [1.0, 2.0])
        np.testing.assert_allclose(b1, [1.0, 2.0])
        np.testing.assert_allclose(b2, [1.0, 2.0])

    def test_binomial_values(self):
        """Test binomial cumulant at eta = 0"""
        b, b1, b2 = eval_b(Family.BINOMIAL, np.array([3.0]), np.array([0.0]))
        np.testing.assert_allclose(b, [3.0 * np.log(2.0)])
        np.testing.assert_allclose(b1, [1.5])
        np.testing.assert_allclose(b2, [0.75])

    def test_binomial_extreme_eta_is_finite(self):
        """Test the binomial cumulant stays finite for |eta| in the hundreds"""
        b, b1, b2 = eval_b(Family.BINOMIAL, np.array([5.0, 5.0]), np.array([800.0, -800.0]))
        assert np.all(np.isfinite(b))
        np.testing.assert_allclose(b1, [5.0, 0.0], atol=1e-300)
        np.testing.assert_allclose(b, [4000.0, 0.0], atol=1e-12)

    def test_poisson_exponent_is_clipped(self):
        """Test exp(eta) is clipped instead of overflowing"""
        b, _, _ = eval_b(Family.POISSON, None, np.array([1000.0]))
        assert np.isfinite(b[0])
        assert b[0] == pytest.approx(np.exp(700.0))

    def test_binomial_without_trials(self):
        """Test binomial evaluation requires trials"""
        with pytest.raises(DataError, match="trials"):
            eval_b(Family.BINOMIAL, None, np.zeros(2))


class TestWorkingVectors:
    """Tests for working response, weights and initialization"""

    def test_poisson_initial_state(self, poisson_grouped):
        """Test Poisson starting weights are y + 0.5"""
        work = init_state(Family.POISSON, poisson_grouped)
        y = poisson_grouped.y
        np.testing.assert_allclose(work.weights, y + 0.5)
        np.testing.assert_allclose(work.ytilde, np.log(y + 0.5) - 0.5 / (y + 0.5))

    def test_binomial_initial_state(self, binomial_grouped):
        """Test binomial starting weights are m(y+0.5)(m-y+0.5)/(m+1)^2"""
        work = init_state(Family.BINOMIAL, binomial_grouped)
        y, m = binomial_grouped.y, binomial_grouped.trials
        expected = m * (y + 0.5) * (m - y + 0.5) / (m + 1.0) ** 2
        np.testing.assert_allclose(work.weights, expected, rtol=1e-12)

    def test_working_response_definition(self, poisson_grouped, rng):
        """Test ytilde = eta + (y - b'(eta)) / b''(eta)"""
        eta = rng.normal(1.0, 0.5, poisson_grouped.n)
        work = working_response(Family.POISSON, poisson_grouped, eta)
        mu = np.exp(eta)
        np.testing.assert_allclose(work.ytilde, eta + (poisson_grouped.y - mu) / mu)
        assert work.clamped == ()

    def test_weights_are_clamped(self):
        """Test weights below the floor are clamped and recorded"""
        data = GlmmData(y=[5.0, 2.0], X=np.ones((2, 1)), Z=np.eye(2), trials=[5.0, 5.0])
        work = working_response(Family.BINOMIAL, data, np.array([60.0, 0.0]))
        assert work.clamped == (0,)
        assert work.weights[0] == WEIGHT_FLOOR
        assert work.weights[1] == pytest.approx(1.25)

    def test_clamping_is_logged_as_warning(self, caplog):
        """Test a clamped weight is reported at WARNING level"""
        data = GlmmData(y=[0.0, 3.0], X=np.ones((2, 1)), Z=np.eye(2))
        with caplog.at_level(logging.WARNING, logger="pmglmm.family"):
            work = working_response(Family.POISSON, data, np.array([-40.0, 1.0]))
        assert work.clamped == (0,)
        assert any(
            r.levelno == logging.WARNING and "Clamped 1 working weights" in r.getMessage()
            for r in caplog.records
        )

    def test_eta_shape_mismatch(self, poisson_grouped):
        """Test a wrongly sized eta is rejected"""
        with pytest.raises(ValueError, match="eta must have shape"):
            working_response(Family.POISSON, poisson_grouped, np.zeros(3))


class TestLoglikConditional:
    """Tests for the exact conditional log-density"""

    def test_poisson_matches_scipy(self, poisson_grouped, rng):
        """Test Poisson log-density against scipy.stats"""
        eta = rng.normal(2.0, 0.3, poisson_grouped.n)
        expected = np.sum(poisson.logpmf(poisson_grouped.y, np.exp(eta)))
        assert loglik_conditional(Family.POISSON, poisson_grouped, eta) == pytest.approx(
            expected, rel=1e-12
        )

    def test_binomial_matches_scipy(self, binomial_grouped, rng):
        """Test binomial log-density against scipy.stats"""
        eta = rng.normal(0.0, 1.0, binomial_grouped.n)
        p = 1.0 / (1.0 + np.exp(-eta))
        expected = np.sum(binom.logpmf(binomial_grouped.y, binomial_grouped.trials, p))
        assert loglik_conditional(Family.BINOMIAL, binomial_grouped, eta) == pytest.approx(
            expected, rel=1e-10
        )

    def test_batched_eta(self, poisson_grouped, rng):
        """Test leading batch axes are summed over the last axis only"""
        etas = rng.normal(2.0, 0.3, (4, poisson_grouped.n))
        batched = loglik_conditional(Family.POISSON, poisson_grouped, etas)
        assert batched.shape == (4,)
        for i in range(4):
            assert batched[i] == pytest.approx(
                loglik_conditional(Family.POISSON, poisson_grouped, etas[i])
            )


class TestGlmmData:
    """Tests for dataset validation"""

    def test_dimensions(self, poisson_grouped):
        """Test n, p, d and default names"""
        assert (poisson_grouped.n, poisson_grouped.p, poisson_grouped.d) == (15, 2, 3)
        data = GlmmData(y=[1.0, 2.0, 3.0], X=np.ones((3, 1)), Z=np.eye(3))
        assert data.x_names == ("beta0",)

    def test_response_exceeding_trials_names_row(self, binomial_grouped):
        """Test y > m is reported with its 1-based row"""
        y = binomial_grouped.y.copy()
        y[6] = 25.0
        data = GlmmData(y=y, X=binomial_grouped.X, Z=binomial_grouped.Z, trials=binomial_grouped.trials)
        with pytest.raises(DataError, match="row 7") as exc_info:
            check_data(Family.BINOMIAL, data)
        assert exc_info.value.row == 7

    def test_binomial_requires_trials(self, poisson_grouped):
        """Test binomial checks need a trials vector"""
        with pytest.raises(DataError, match="requires a trials vector"):
            check_data(Family.BINOMIAL, poisson_grouped)

    def test_negative_response(self):
        """Test negative counts are rejected"""
        with pytest.raises(DataError, match="row 2"):
            GlmmData(y=[1.0, -1.0], X=np.ones((2, 1)), Z=np.eye(2))

    def test_non_integer_response(self):
        """Test fractional counts are rejected"""
        with pytest.raises(DataError, match="nonnegative integer"):
            GlmmData(y=[1.5, 1.0], X=np.ones((2, 1)), Z=np.eye(2))

    def test_rank_deficient_design(self):
        """Test collinear X columns are rejected"""
        X = np.column_stack([np.ones(4), 2.0 * np.ones(4)])
        with pytest.raises(DataError, match="X is rank deficient"):
            GlmmData(y=[1.0, 2.0, 3.0, 4.0], X=X, Z=np.eye(4))

    def test_row_count_mismatch(self):
        """Test X with the wrong number of rows is rejected"""
        with pytest.raises(DataError, match="X has 3 rows"):
            GlmmData(y=[1.0, 2.0], X=np.ones((3, 1)), Z=np.eye(2))

    def test_non_finite_design(self):
        """Test NaN in X is rejected"""
        X = np.ones((2, 1))
        X[1, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            GlmmData(y=[1.0, 2.0], X=X, Z=np.eye(2))

    def test_digest_depends_on_response_only(self, poisson_grouped):
        """Test nested designs on the same responses share a digest"""
        reduced = GlmmData(y=poisson_grouped.y, X=poisson_grouped.X[:, :1], Z=poisson_grouped.Z)
        assert reduced.digest == poisson_grouped.digest
        y = poisson_grouped.y.copy()
        y[0] += 1.0
        changed = GlmmData(y=y, X=poisson_grouped.X, Z=poisson_grouped.Z)
        assert changed.digest != poisson_grouped.digest


class TestParseFamily:
    """Tests for family parsing"""

    def test_names_and_aliases(self):
        """Test canonical names and aliases"""
        assert parse_family("poisson") is Family.POISSON
        assert parse_family("Binomial-Logit") is Family.BINOMIAL
        assert parse_family(Family.POISSON) is Family.POISSON

    def test_unknown_family(self):
        """Test unknown family names list the supported ones"""
        with pytest.raises(ValueError, match="Unsupported family"):
            parse_family("gamma")

    def test_requires_trials(self):
        """Test trials requirement per family"""
        assert Family.BINOMIAL.requires_trials
        assert not Family.POISSON.requires_trials
