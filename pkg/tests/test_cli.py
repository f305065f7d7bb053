"""
Tests for the pm-glmm command-line interface
"""
import json

import pytest

from pmglmm.cli import EXIT_OK, EXIT_USER_ERROR, run_cli
from pmglmm.reports import FIT_FIELDS

from .conftest import GROUP_SIZE, GROUPED_COUNTS, GROUPED_SUCCESSES, N_GROUPS, TRIALS

X_VALUES = ["-1", "-0.5", "0", "0.5", "1"]
GROUPS = "abc"

GROUPED_CONFIG = """
family = "poisson"

[covariance]
kind = "scaled-identity"

[data]
response = "y"
covariates = [{covariates}]
group = "g"
"""


def grouped_rows(responses, trials=None):
    header = "y,x,g" if trials is None else "y,m,x,g"
    lines = [header]
    for i, y in enumerate(responses):
        cells = [str(y), X_VALUES[i % GROUP_SIZE], GROUPS[i // GROUP_SIZE]]
        if trials is not None:
            cells.insert(1, str(trials))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@pytest.fixture
def workspace(tmp_path):
    """Grouped Poisson dataset with configs for the full (1, x) and reduced (1) models"""
    assert len(GROUPED_COUNTS) == GROUP_SIZE * N_GROUPS
    (tmp_path / "data.csv").write_text(grouped_rows(GROUPED_COUNTS))
    (tmp_path / "full.toml").write_text(GROUPED_CONFIG.format(covariates='"x"'))
    (tmp_path / "reduced.toml").write_text(GROUPED_CONFIG.format(covariates=""))
    return tmp_path


def run_fit(workspace, config="full.toml", out="fit.json", *extra):
    return run_cli([
        "fit",
        "--data", str(workspace / "data.csv"),
        "--config", str(workspace / config),
        "--out", str(workspace / out),
        *extra,
    ])


class TestFitCommand:
    """Tests for `pm-glmm fit`"""

    def test_fit_writes_report(self, workspace, capsys):
        """Test a successful fit writes a complete report and a summary line"""
        assert run_fit(workspace) == EXIT_OK
        report = json.loads((workspace / "fit.json").read_text())
        for name in FIT_FIELDS:
            assert name in report
        assert report["kind"] == "fit"
        assert report["converged"] is True
        assert report["parameters"] == ["intercept", "x", "omega1"]
        assert "converged=True" in capsys.readouterr().out

    def test_single_start(self, workspace):
        """Test --starts none runs one fit from the configured omega"""
        assert run_fit(workspace, "full.toml", "single.json", "--starts", "none") == EXIT_OK
        report = json.loads((workspace / "single.json").read_text())
        assert report["converged"] is True

    def test_report_to_stdout(self, workspace, capsys):
        """Test the report goes to stdout without --out"""
        code = run_cli([
            "fit", "--data", str(workspace / "data.csv"),
            "--config", str(workspace / "full.toml"), "--starts", "none",
        ])
        assert code == EXIT_OK
        assert json.loads(capsys.readouterr().out)["kind"] == "fit"

    def test_unknown_config_key(self, workspace, capsys):
        """Test an unknown configuration key is a user error naming the key"""
        bad = workspace / "bad.toml"
        bad.write_text(GROUPED_CONFIG.format(covariates='"x"') + "\n[solver]\nbogus = 1\n")
        assert run_fit(workspace, "bad.toml") == EXIT_USER_ERROR
        assert "solver.bogus" in capsys.readouterr().err

    def test_missing_data_file(self, workspace, capsys):
        """Test a missing dataset is a user error"""
        (workspace / "data.csv").unlink()
        assert run_fit(workspace) == EXIT_USER_ERROR
        assert "error:" in capsys.readouterr().err

    def test_response_exceeds_trials(self, tmp_path, capsys):
        """Test a binomial response above its trials names the row"""
        successes = list(GROUPED_SUCCESSES)
        successes[6] = TRIALS + 5
        (tmp_path / "data.csv").write_text(grouped_rows(successes, trials=TRIALS))
        (tmp_path / "binomial.toml").write_text(
            'family = "binomial"\n[covariance]\nkind = "scaled-identity"\n'
            '[data]\nresponse = "y"\ntrials = "m"\ncovariates = ["x"]\ngroup = "g"\n'
        )
        assert run_fit(tmp_path, "binomial.toml") == EXIT_USER_ERROR
        assert "row 7" in capsys.readouterr().err

    def test_invalid_starts(self, workspace, capsys):
        """Test malformed --starts values"""
        assert run_fit(workspace, "full.toml", "fit.json", "--starts", "a,b") == EXIT_USER_ERROR
        assert "--starts" in capsys.readouterr().err


class TestTestCommand:
    """Tests for `pm-glmm test`"""

    def test_nested_tests(self, workspace):
        """Test all three statistics are reported for a nested pair"""
        assert run_fit(workspace, "full.toml", "full.json") == EXIT_OK
        assert run_fit(workspace, "reduced.toml", "reduced.json") == EXIT_OK
        (workspace / "B.csv").write_text("1,0,0\n0,0,1\n")

        code = run_cli([
            "test",
            "--data", str(workspace / "data.csv"),
            "--config", str(workspace / "full.toml"),
            "--full", str(workspace / "full.json"),
            "--reduced", str(workspace / "reduced.json"),
            "--B", str(workspace / "B.csv"),
            "--out", str(workspace / "tests.json"),
        ])
        assert code == EXIT_OK
        report = json.loads((workspace / "tests.json").read_text())
        assert report["kind"] == "test"
        assert [t["name"] for t in report["tests"]] == ["lr", "score", "gwald"]
        for t in report["tests"]:
            assert t["df"] == 1
            assert 0.0 <= t["p"] <= 1.0

    def test_wrong_report_kind(self, workspace, capsys):
        """Test a non-fit report is rejected"""
        (workspace / "other.json").write_text('{"kind": "study"}')
        (workspace / "B.csv").write_text("1,0,0\n0,0,1\n")
        code = run_cli([
            "test",
            "--data", str(workspace / "data.csv"),
            "--config", str(workspace / "full.toml"),
            "--full", str(workspace / "other.json"),
            "--reduced", str(workspace / "other.json"),
            "--B", str(workspace / "B.csv"),
        ])
        assert code == EXIT_USER_ERROR
        assert "not a fit report" in capsys.readouterr().err


class TestOracleCheckCommand:
    """Tests for `pm-glmm oracle-check`"""

    def test_oracle_check(self, workspace, capsys):
        """Test the exact score is evaluated at a fitted solution"""
        assert run_fit(workspace) == EXIT_OK
        capsys.readouterr()
        code = run_cli([
            "oracle-check",
            "--data", str(workspace / "data.csv"),
            "--config", str(workspace / "full.toml"),
            "--fit", str(workspace / "fit.json"),
            "--oracle-nodes", "20",
            "--out", str(workspace / "oracle.json"),
        ])
        assert code == EXIT_OK
        assert "score_norm=" in capsys.readouterr().out
        report = json.loads((workspace / "oracle.json").read_text())
        assert report["kind"] == "oracle-check"
        assert report["nodes"] == 20 ** N_GROUPS
        assert isinstance(report["certified"], bool)


class TestSimulateCommand:
    """Tests for `pm-glmm simulate`"""

    def test_simulate(self, tmp_path):
        """Test a small study writes the report and both CSV tables"""
        config = tmp_path / "sim.toml"
        config.write_text(
            'family = "poisson"\nseed = 3\n'
            '[simulation]\nn = 20\nreplications = 2\nmethods = ["oracle"]\n'
        )
        code = run_cli(["simulate", "--config", str(config), "--out", str(tmp_path / "study.json")])
        assert code == EXIT_OK
        report = json.loads((tmp_path / "study.json").read_text())
        assert report["kind"] == "study"
        assert report["replications"] == 2
        assert report["n_fail"] == {"oracle": 0}
        assert (tmp_path / "study.csv").exists()
        assert (tmp_path / "study_estimates.csv").exists()


class TestArguments:
    """Tests for argument handling"""

    def test_no_subcommand(self, capsys):
        """Test a missing subcommand is a user error"""
        assert run_cli([]) == EXIT_USER_ERROR
        assert "arguments:" in capsys.readouterr().err

    def test_help(self, capsys):
        """Test --help exits cleanly"""
        assert run_cli(["--help"]) == EXIT_OK
        assert "pm-glmm" in capsys.readouterr().out

    def test_invalid_log_level(self, workspace, capsys):
        """Test an unknown log level is a user error"""
        code = run_fit(workspace, "full.toml", "fit.json", "--log-level", "LOUD")
        assert code == EXIT_USER_ERROR
        assert "Invalid log level" in capsys.readouterr().err
