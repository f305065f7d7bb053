"""
Command-line interface.

    pm-glmm fit --data d.csv --config run.toml --out fit.json
    pm-glmm test --data d.csv --config run.toml --full f2.json --reduced f1.json --B B.csv
    pm-glmm simulate --config run.toml --out study.json
    pm-glmm oracle-check --data d.csv --config run.toml --fit fit.json

Exit codes: 0 success, 1 user error (data, configuration, arguments, domain),
2 numerical failure or a fit that did not converge.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .config import RunConfig, apply_overrides, load_config, load_schema
from .data import DatasetSchema, load_dataset
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DomainError,
    NotPositiveDefiniteError,
    SingularInformationError,
)
from .family import Family, GlmmData
from .inference import load_restriction, nested_tests
from .oracle import evaluate
from .reports import oracle_report, read_fit_report, write_report
from .simulate import SimConfig, run_study
from .solver import fit, multistart_fit
from .utils.logging_utils import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_NUMERICAL_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems as ConfigError instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError("arguments", message)


def _parse_starts(value: str) -> Optional[List[Tuple[float, ...]]]:
    """'grid' → None (the kind's grid); otherwise ω vectors as 'a,b;c,d'."""
    if value == "grid":
        return None
    try:
        parts = [part for part in value.split(";") if part.strip()]
        return [tuple(float(w) for w in part.split(",")) for part in parts]
    except ValueError:
        raise ConfigError(
            "--starts", f"expected 'grid', 'none' or vectors like '0.5,1;0.25,2', got {value!r}"
        )


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--schema", help="TOML file with a [data] table (overrides the config's)")
    common.add_argument("--out", help="report path (JSON); stdout when omitted")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument(
        "--log-level", default="WARNING", help="DEBUG, INFO, WARNING or ERROR (default WARNING)"
    )

    parser = _Parser(prog="pm-glmm", description="Exact maximum likelihood for GLMMs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_fit = sub.add_parser("fit", parents=[common], help="fit a model and write a fit report")
    p_fit.add_argument("--data", required=True, help="delimited dataset with a header row")
    p_fit.add_argument(
        "--starts",
        help="'grid' (default), 'none' for a single fit, or omega vectors '0.5,1;0.25,2'",
    )
    p_fit.add_argument("--fix-omega3", dest="fix_omega3", action="store_true", default=None,
                       help="hold the Matérn smoothness fixed")
    p_fit.add_argument("--no-fix-omega3", dest="fix_omega3", action="store_false", default=None,
                       help="estimate the Matérn smoothness")

    p_test = sub.add_parser("test", parents=[common], help="nested-model tests from two fit reports")
    p_test.add_argument("--data", required=True)
    p_test.add_argument("--full", required=True, help="fit report of the full model")
    p_test.add_argument("--reduced", required=True, help="fit report of the reduced model")
    p_test.add_argument("--B", required=True, dest="restriction", help="restriction matrix CSV")

    p_sim = sub.add_parser("simulate", parents=[common], help="run an RMSE simulation study")
    p_sim.add_argument("--full-scale", action="store_true",
                       help="400 sites, beta0=10, 1000 replications")

    p_oracle = sub.add_parser("oracle-check", parents=[common],
                              help="exact score at a fitted solution by quadrature")
    p_oracle.add_argument("--data", required=True)
    p_oracle.add_argument("--fit", required=True, dest="fit_report", help="fit report")
    p_oracle.add_argument("--oracle-nodes", type=int, help="Hermite nodes per dimension")
    return parser


def _run_config(args: argparse.Namespace, family: Optional[Family] = None) -> RunConfig:
    if args.config is not None:
        config = load_config(args.config)
    elif family is not None:
        config = RunConfig(family=family)
    else:
        raise ConfigError("family", "required (give --config)")
    starts = getattr(args, "starts", None)
    return apply_overrides(
        config,
        seed=args.seed,
        starts=_parse_starts(starts) if starts not in (None, "none") else None,
        fix_omega3=getattr(args, "fix_omega3", None),
        oracle_nodes=getattr(args, "oracle_nodes", None),
        threads=args.threads,
    )


def _schema(args: argparse.Namespace, config: RunConfig) -> DatasetSchema:
    if args.schema is not None:
        return load_schema(args.schema)
    if config.schema is None:
        raise ConfigError("data", "required (give --schema or a [data] table in --config)")
    return config.schema


def _load(args: argparse.Namespace, config: RunConfig, family: Family) -> GlmmData:
    return load_dataset(args.data, _schema(args, config), family)


def _emit(result: object, args: argparse.Namespace, config: Optional[RunConfig] = None) -> None:
    out = args.out or (config.output if config is not None else None)
    if out is None:
        write_report(result, stream=sys.stdout)  # type: ignore[arg-type]
    else:
        write_report(result, out)  # type: ignore[arg-type]


def cmd_fit(args: argparse.Namespace) -> int:
    config = _run_config(args)
    data = _load(args, config, config.family)
    spec = config.covariance.spec(data)
    if args.starts == "none":
        result = fit(data, config.family, spec, config.solver)
    else:
        result = multistart_fit(data, config.family, spec, config.solver)
    _emit(result, args, config)
    if args.out or config.output:
        print(
            f"converged={result.converged} psi0={result.psi0:.10g} "
            f"grad_norm={result.grad_norm:.3g} iterations={result.iterations}"
        )
    return EXIT_OK if result.converged else EXIT_NUMERICAL_FAILURE


def cmd_test(args: argparse.Namespace) -> int:
    full = read_fit_report(args.full)
    reduced = read_fit_report(args.reduced)
    config = _run_config(args, full.family)
    data = _load(args, config, full.family)
    full.check_data(data)
    reduced.check_data(data)
    restriction = load_restriction(args.restriction)
    results = nested_tests(
        data, full.family, full.covariance_spec(data), full, reduced, reduced.theta,
        restriction, config.solver,
    )
    _emit(results, args)
    if args.out:
        for r in results:
            print(f"{r.kind.value}: value={r.value:.6g} df={r.df} p={r.p:.6g}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _run_config(args, Family.POISSON)
    if args.full_scale:
        sim = SimConfig.full_scale(
            seed=config.seed, threads=config.solver.threads, solver=config.solver
        )
    elif config.simulation is not None:
        sim = config.simulation
    else:
        sim = SimConfig(
            family=config.family, seed=config.seed, threads=config.solver.threads,
            solver=config.solver,
        )
    study = run_study(sim)
    _emit(study, args, config)
    out = args.out or config.output
    if out is not None:
        base = Path(out)
        study.to_csv(base.with_suffix(".csv"))
        study.estimates_to_csv(base.with_name(f"{base.stem}_estimates.csv"))
        print(study.format_table())
    return EXIT_OK


def cmd_oracle_check(args: argparse.Namespace) -> int:
    report = read_fit_report(args.fit_report)
    config = _run_config(args, report.family)
    data = _load(args, config, report.family)
    report.check_data(data)
    rule = config.oracle
    evaluation = evaluate(
        data, report.family, report.covariance_spec(data), report.beta, report.omega, rule
    )
    summary = oracle_report(evaluation, rule)
    if args.out:
        write_report(summary, args.out)
    print(
        f"score_norm={evaluation.score_norm:.6e} loglik={evaluation.loglik:.10g} "
        f"nodes={evaluation.nodes} certified={summary['certified']}"
    )
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "fit": cmd_fit,
    "test": cmd_test,
    "simulate": cmd_simulate,
    "oracle-check": cmd_oracle_check,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and map failures to exit codes.

    Returns:
        0 on success, 1 on user error, 2 on numerical failure or non-convergence
    """
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        return int(e.code or 0)
    except (NotPositiveDefiniteError, ConvergenceError, SingularInformationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL_FAILURE
    except (DataError, ConfigError, DomainError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER_ERROR


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
