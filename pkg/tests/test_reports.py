"""
Tests for JSON reports
"""
import json

import numpy as np
import pytest

from pmglmm.errors import DataError
from pmglmm.family import Family
from pmglmm.inference import TestKind, TestResult
from pmglmm.oracle import OracleEvaluation, QuadratureRule
from pmglmm.reports import (
    FIT_FIELDS,
    build_report,
    dumps_report,
    oracle_report,
    read_fit_report,
    read_report,
    write_report,
)
from pmglmm.simulate import Replication, RmseRow, StudyResult
from pmglmm.solver import SolverConfig, fit


@pytest.fixture
def grouped_fit(poisson_grouped, identity_spec):
    return fit(poisson_grouped, Family.POISSON, identity_spec)


class TestFitReport:
    """Tests for fit reports"""

    def test_fields(self, grouped_fit):
        """Test every required field is present and typed for JSON"""
        report = build_report(grouped_fit)
        for name in FIT_FIELDS:
            assert name in report
        assert report["family"] == "poisson"
        assert report["covariance"]["kind"] == "scaled-identity"
        assert report["free"] == [True, True, True]
        assert len(report["trace"]) == grouped_fit.iterations

    def test_round_trip(self, grouped_fit, poisson_grouped, tmp_path):
        """Test values read back from disk are bit-identical"""
        path = tmp_path / "fit.json"
        write_report(grouped_fit, path)
        loaded = read_fit_report(path)
        assert loaded.family is Family.POISSON
        assert np.array_equal(loaded.beta, grouped_fit.beta)
        assert np.array_equal(loaded.omega, grouped_fit.omega)
        assert loaded.psi0 == grouped_fit.psi0
        assert loaded.k == grouped_fit.k
        assert np.array_equal(loaded.theta, grouped_fit.theta)
        loaded.check_data(poisson_grouped)

    def test_deterministic(self, grouped_fit):
        """Test identical results give identical text"""
        assert dumps_report(grouped_fit) == dumps_report(grouped_fit)

    def test_covariance_spec(self, grouped_fit, poisson_grouped, tmp_path):
        """Test the fitted covariance model is rebuilt on the dataset"""
        path = tmp_path / "fit.json"
        write_report(grouped_fit, path)
        spec = read_fit_report(path).covariance_spec(poisson_grouped)
        assert spec.kind is grouped_fit.spec.kind
        assert spec.omega == tuple(grouped_fit.omega)

    def test_other_data(self, grouped_fit, binomial_grouped, tmp_path):
        """Test a report is tied to the responses it was fitted to"""
        path = tmp_path / "fit.json"
        write_report(grouped_fit, path)
        with pytest.raises(DataError, match="dataset differs"):
            read_fit_report(path).check_data(binomial_grouped)

    def test_not_converged(self, poisson_grouped, identity_spec):
        """Test a capped fit is reported with its warnings"""
        result = fit(poisson_grouped, Family.POISSON, identity_spec, SolverConfig(max_outer=1))
        report = json.loads(dumps_report(result))
        assert report["converged"] is False
        assert report["warnings"]


class TestReadReport:
    """Tests for reading reports back"""

    def test_wrong_kind(self, tmp_path):
        """Test a report of another kind is rejected"""
        path = tmp_path / "study.json"
        path.write_text('{"kind": "study"}')
        with pytest.raises(DataError, match="not a fit report"):
            read_fit_report(path)

    def test_missing_fields(self, tmp_path):
        """Test a fit report without its fields is rejected"""
        path = tmp_path / "fit.json"
        path.write_text('{"kind": "fit", "family": "poisson"}')
        with pytest.raises(DataError, match="missing fields: covariance"):
            read_fit_report(path)

    def test_invalid_json(self, tmp_path):
        """Test unparsable files"""
        path = tmp_path / "fit.json"
        path.write_text("{")
        with pytest.raises(DataError, match="not valid JSON"):
            read_report(path)

    def test_not_an_object(self, tmp_path):
        """Test a JSON document that is not an object"""
        path = tmp_path / "fit.json"
        path.write_text("[1, 2]")
        with pytest.raises(DataError, match="does not hold a JSON object"):
            read_report(path)


class TestOtherReports:
    """Tests for test, study and oracle-check reports"""

    def test_non_finite_values(self):
        """Test NaN and infinities are written as null"""
        text = dumps_report({"kind": "custom", "se": np.array([1.5, np.nan]), "value": np.inf})
        assert json.loads(text) == {"kind": "custom", "se": [1.5, None], "value": None}

    def test_nested_tests(self):
        """Test one entry per statistic"""
        results = [
            TestResult(TestKind.LR, 6.61, 1, 0.0101),
            TestResult(TestKind.SCORE, 2.5, 1, 0.114, ("warning",)),
        ]
        report = build_report(results)
        assert report["kind"] == "test"
        assert [t["name"] for t in report["tests"]] == ["lr", "score"]
        assert report["tests"][1]["warnings"] == ["warning"]

    def test_study(self):
        """Test RMSE rows and failure counts"""
        study = StudyResult(
            parameters=("beta0", "omega1"),
            truth=(2.0, 0.5),
            rows=(
                RmseRow("oracle", "beta0", 0.1, 0),
                RmseRow("oracle", "omega1", 0.05, 0),
                RmseRow("pm", "beta0", 0.2, 1),
                RmseRow("pm", "omega1", 0.08, 1),
            ),
            replications=(
                Replication(0, "oracle", (2.1, 0.45)),
                Replication(0, "pm", None, "R is not positive definite"),
                Replication(1, "oracle", (1.9, 0.55)),
                Replication(1, "pm", (2.2, 0.42)),
            ),
        )
        report = build_report(study)
        assert report["kind"] == "study"
        assert report["n_fail"] == {"oracle": 0, "pm": 1}
        assert report["replications"] == 2
        assert len(report["rmse"]) == 4

    def test_oracle(self):
        """Test the certification flag follows the threshold"""
        evaluation = OracleEvaluation(
            loglik=-40.0, score=np.array([2e-5, -1e-5]), posterior_mean=np.zeros(3), nodes=8000
        )
        report = oracle_report(evaluation, QuadratureRule(nodes_per_dim=20))
        assert report["certified"] is True
        assert report["nodes_per_dim"] == 20
        assert report["score_norm"] == pytest.approx(2e-5)
        strict = oracle_report(evaluation, QuadratureRule(nodes_per_dim=20, threshold=1e-6))
        assert strict["certified"] is False

    def test_write_needs_target(self):
        """Test writing without a path or stream"""
        with pytest.raises(ValueError, match="needs a path or a stream"):
            write_report({"kind": "custom"})

    def test_unsupported_result(self):
        """Test objects without a report builder"""
        with pytest.raises(TypeError, match="cannot build a report"):
            build_report([1, 2])
