"""
Machine-readable JSON reports for fit, test, simulate and oracle-check runs.

Floats are written with Python's shortest round-trip repr, so reading a report back
reproduces every value bit for bit. NaN and infinities become null. Reports carry no
timestamps: identical inputs give byte-identical files.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .covariance import CovarianceKind, CovarianceSpec, parse_covariance_kind
from .errors import DataError
from .family import Family, GlmmData, parse_family
from .inference import TestResult
from .oracle import OracleEvaluation, QuadratureRule
from .simulate import StudyResult
from .solver import FitResult

logger = logging.getLogger(__name__)

FIT_FIELDS = (
    "kind", "family", "covariance", "parameters", "free", "estimates", "se", "psi0",
    "grad", "grad_norm", "converged", "iterations", "warnings", "gammahat", "data_digest",
)


def _clean(value: Any) -> Any:
    """Recursively convert numpy containers and scalars to JSON-safe Python values."""
    if isinstance(value, Mapping):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def fit_report(result: FitResult, include_trace: bool = True) -> Dict[str, Any]:
    """Fit report with estimates, standard errors and convergence diagnostics"""
    report: Dict[str, Any] = {
        "kind": "fit",
        "family": result.family.value,
        "covariance": {
            "kind": result.spec.kind.value,
            "fixed": list(result.spec.fixed_mask),
            "jitter": result.spec.jitter,
        },
        "parameters": list(result.parameter_names),
        "free": list(result.free_mask),
        "estimates": {"beta": result.beta, "omega": result.omega},
        "se": result.se,
        "psi0": result.psi0,
        "grad": result.grad,
        "grad_norm": result.grad_norm,
        "converged": result.converged,
        "iterations": result.iterations,
        "warnings": list(result.warnings),
        "gammahat": result.gammahat,
        "data_digest": result.data_digest,
    }
    if include_trace:
        report["trace"] = [
            {"iteration": t.iteration, "beta": t.beta, "omega": t.omega, "psi": t.psi,
             "step_norm": t.step_norm, "grad_norm": t.grad_norm}
            for t in result.trace
        ]
    return report


def nested_test_report(results: Sequence[TestResult]) -> Dict[str, Any]:
    """Nested-model test report: one entry per statistic"""
    return {
        "kind": "test",
        "tests": [
            {"name": r.kind.value, "value": r.value, "df": r.df, "p": r.p,
             "warnings": list(r.warnings)}
            for r in results
        ],
    }


def study_report(study: StudyResult) -> Dict[str, Any]:
    """RMSE table and failure counts of a simulation study"""
    methods = list(dict.fromkeys(row.method for row in study.rows))
    return {
        "kind": "study",
        "parameters": list(study.parameters),
        "truth": list(study.truth),
        "rmse": [
            {"method": r.method, "parameter": r.parameter, "rmse": r.rmse, "n_fail": r.n_fail}
            for r in study.rows
        ],
        "n_fail": {m: study.n_fail(m) for m in methods},
        "replications": len({r.index for r in study.replications}),
    }


def oracle_report(evaluation: OracleEvaluation, rule: QuadratureRule) -> Dict[str, Any]:
    """Exact score and log-likelihood at a fitted solution"""
    return {
        "kind": "oracle-check",
        "score_norm": evaluation.score_norm,
        "score": evaluation.score,
        "loglik": evaluation.loglik,
        "nodes": evaluation.nodes,
        "nodes_per_dim": rule.nodes_per_dim,
        "centering": rule.centering.value,
        "threshold": rule.threshold,
        "certified": evaluation.score_norm < rule.threshold,
        "warnings": list(evaluation.warnings),
    }


ReportSource = Union[FitResult, StudyResult, OracleEvaluation, Sequence[TestResult], Mapping[str, Any]]


def build_report(result: ReportSource) -> Dict[str, Any]:
    """Dispatch a result object to its report builder; mappings pass through."""
    if isinstance(result, FitResult):
        return fit_report(result)
    if isinstance(result, StudyResult):
        return study_report(result)
    if isinstance(result, OracleEvaluation):
        return oracle_report(result, QuadratureRule())
    if isinstance(result, Mapping):
        return dict(result)
    if all(isinstance(r, TestResult) for r in result):
        return nested_test_report(result)
    raise TypeError(f"cannot build a report from {type(result).__name__}")


def dumps_report(result: ReportSource) -> str:
    return json.dumps(_clean(build_report(result)), indent=2, allow_nan=False) + "\n"


def write_report(
    result: ReportSource,
    path: Optional[Union[str, Path]] = None,
    stream: Optional[TextIO] = None,
) -> None:
    """
    Write a JSON report to `path`, or to `stream` when no path is given.

    Raises:
        OSError: the file cannot be written
    """
    text = dumps_report(result)
    if path is None:
        if stream is None:
            raise ValueError("write_report needs a path or a stream")
        stream.write(text)
        return
    Path(path).write_text(text, encoding="utf-8")
    logger.info(f"Wrote report {path}")


def read_report(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Raises:
        FileNotFoundError: path does not exist
        DataError: not a JSON object
    """
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}")
    if not isinstance(report, dict):
        raise DataError(f"{path} does not hold a JSON object")
    return report


def _nan(values: Sequence[Optional[float]]) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=float)


@dataclass(frozen=True)
class FitReport:
    """
    A fit read back from its JSON report.

    Satisfies the interface lr_stat needs (psi0, converged, data_digest, k).
    """
    family: Family
    covariance_kind: CovarianceKind
    fixed: Tuple[bool, ...]
    jitter: float
    parameters: Tuple[str, ...]
    beta: np.ndarray
    omega: np.ndarray
    se: np.ndarray
    psi0: float
    grad_norm: float
    converged: bool
    iterations: int
    warnings: Tuple[str, ...]
    data_digest: str

    @property
    def k(self) -> int:
        return int(self.beta.shape[0]) + sum(1 for f in self.fixed if not f)

    @property
    def theta(self) -> np.ndarray:
        """Stacked free parameters (β, free ω)"""
        free = [j for j, f in enumerate(self.fixed) if not f]
        return np.concatenate([self.beta, self.omega[free]])

    def covariance_spec(self, data: GlmmData) -> CovarianceSpec:
        """The fitted covariance model on a dataset's sites"""
        if self.covariance_kind is CovarianceKind.SCALED_IDENTITY:
            return CovarianceSpec(
                self.covariance_kind, tuple(self.omega), self.fixed, jitter=self.jitter, dim=data.d
            )
        return CovarianceSpec(
            self.covariance_kind, tuple(self.omega), self.fixed, data.distances, self.jitter
        )

    def check_data(self, data: GlmmData) -> None:
        """
        Raises:
            DataError: the report was computed on different data
        """
        if data.digest != self.data_digest:
            raise DataError("the dataset differs from the one the fit report was computed on")


def read_fit_report(path: Union[str, Path]) -> FitReport:
    """
    Load a fit report.

    Raises:
        DataError: not a fit report, or a required field is missing
    """
    report = read_report(path)
    if report.get("kind") != "fit":
        raise DataError(f"{path} is not a fit report (kind={report.get('kind')!r})")
    missing: List[str] = [f for f in FIT_FIELDS if f not in report]
    if missing:
        raise DataError(f"{path} is missing fields: {', '.join(missing)}")
    try:
        return FitReport(
            family=parse_family(report["family"]),
            covariance_kind=parse_covariance_kind(report["covariance"]["kind"]),
            fixed=tuple(bool(b) for b in report["covariance"]["fixed"]),
            jitter=float(report["covariance"].get("jitter", 0.0)),
            parameters=tuple(report["parameters"]),
            beta=np.array(report["estimates"]["beta"], dtype=float),
            omega=np.array(report["estimates"]["omega"], dtype=float),
            se=_nan(report["se"]),
            psi0=float(report["psi0"]),
            grad_norm=float(report["grad_norm"]),
            converged=bool(report["converged"]),
            iterations=int(report["iterations"]),
            warnings=tuple(report["warnings"]),
            data_digest=str(report["data_digest"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path} has a malformed field: {e}")
