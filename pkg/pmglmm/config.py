"""
TOML run configuration.

Example:
    family = "binomial"
    seed = 1

    [covariance]
    kind = "matern"
    omega = [0.5, 1.0, 0.5]
    fixed = [false, false, true]

    [solver]
    outer_tol = 1e-8

    [data]
    response = "NO_INF"
    trials = "NO_EXAM"
    covariates = ["ELEVATION", "MAX9"]
    coordinates = ["LONGITUDE", "LATITUDE"]

Unknown keys anywhere abort loading with the dotted key path in the message.
"""
import logging
import sys
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, Union

if sys.version_info < (3, 11):
    import tomli as tomllib
else:
    import tomllib

from .covariance import CovarianceKind, CovarianceSpec, domain_violation, parse_covariance_kind
from .data import DatasetSchema
from .errors import ConfigError, DomainError
from .family import Family, GlmmData, parse_family
from .models import get_covariance_profile
from .oracle import QuadratureRule
from .simulate import SimConfig
from .solver import SolverConfig
from .typing import (
    CovarianceOptions,
    QuadratureOptions,
    SchemaOptions,
    SimulationOptions,
    SolverOptions,
)
from .utils.logging_utils import summarize_config

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ("family", "seed", "output")
TABLES: Dict[str, Type[Any]] = {
    "covariance": CovarianceOptions,
    "solver": SolverOptions,
    "data": SchemaOptions,
    "oracle": QuadratureOptions,
    "simulation": SimulationOptions,
}


@dataclass
class CovarianceSettings:
    """
    Covariance kind with starting ω and fixed mask; defaults come from the kind's profile.

    Attributes:
        kind: Covariance kind
        omega: Starting hyperparameters
        fixed: Fixed mask (True = held constant)
        jitter: Diagonal jitter (allows coincident sites)
    """
    kind: CovarianceKind = CovarianceKind.MATERN
    omega: Optional[Tuple[float, ...]] = None
    fixed: Optional[Tuple[bool, ...]] = None
    jitter: float = 0.0

    def __post_init__(self) -> None:
        """Validate configuration after initialization"""
        self.kind = parse_covariance_kind(self.kind)
        profile = get_covariance_profile(self.kind.value)
        self.omega = tuple(float(w) for w in (self.omega or profile.default_omega))
        self.fixed = tuple(bool(b) for b in (self.fixed or profile.default_fixed))
        r = len(profile.parameter_names)
        if len(self.omega) != r:
            raise ValueError(f"{self.kind.value} covariance needs {r} omega values, got {len(self.omega)}")
        if len(self.fixed) != r:
            raise ValueError(f"fixed must have {r} entries, got {len(self.fixed)}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be non-negative, got {self.jitter}")
        message = domain_violation(self.kind, self.omega)
        if message is not None:
            raise DomainError(message)

    @classmethod
    def from_options(cls, **options: Any) -> "CovarianceSettings":
        """Build from a [covariance] option table"""
        return cls(**options)

    def spec(self, data: GlmmData) -> CovarianceSpec:
        """
        CovarianceSpec for a dataset: spatial kinds use the data's site distances.

        Raises:
            DomainError: spatial kind without coordinates, or dimension mismatch
        """
        if self.kind is CovarianceKind.SCALED_IDENTITY:
            return CovarianceSpec(self.kind, self.omega, self.fixed, jitter=self.jitter, dim=data.d)
        if data.distances is None:
            raise DomainError(f"{self.kind.value} covariance needs site coordinates in the dataset")
        return CovarianceSpec(self.kind, self.omega, self.fixed, data.distances, self.jitter)

    def with_omega3_fixed(self, fixed: bool) -> "CovarianceSettings":
        if self.kind is not CovarianceKind.MATERN:
            raise DomainError(f"omega3 exists only for the matern kind, not {self.kind.value}")
        mask = list(self.fixed)
        mask[2] = fixed
        return replace(self, fixed=tuple(mask))


@dataclass
class RunConfig:
    """
    Validated run configuration.

    Attributes:
        family: Response family
        covariance: Covariance settings
        solver: Solver settings
        schema: Dataset column mapping, None when given separately
        oracle: Quadrature settings for oracle-check
        simulation: Simulation settings
        seed: Seed for start jitter and simulation
        output: Default report path
    """
    family: Family
    covariance: CovarianceSettings = field(default_factory=CovarianceSettings)
    solver: SolverConfig = field(default_factory=SolverConfig)
    schema: Optional[DatasetSchema] = None
    oracle: QuadratureRule = field(default_factory=QuadratureRule)
    simulation: Optional[SimConfig] = None
    seed: int = 0
    output: Optional[str] = None


def _read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(path), f"invalid TOML: {e}")


def _check_keys(table: Mapping[str, Any], allowed: Any, prefix: str) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _table(raw: Mapping[str, Any], key: str) -> Dict[str, Any]:
    table = raw.get(key, {})
    if not isinstance(table, Mapping):
        raise ConfigError(key, "must be a table")
    return dict(table)


def _build(prefix: str, factory: Any, table: Mapping[str, Any]) -> Any:
    _check_keys(table, TABLES[prefix].__annotations__, f"{prefix}.")
    try:
        return factory(**table)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(prefix, str(e))


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    """
    Validate a parsed TOML document.

    Raises:
        ConfigError: unknown key, missing family or invalid value, with the key path
    """
    _check_keys(raw, TOP_LEVEL_KEYS + tuple(TABLES), "")
    if "family" not in raw:
        raise ConfigError("family", "required")
    try:
        family = parse_family(raw["family"])
    except (ValueError, AttributeError) as e:
        raise ConfigError("family", str(e))

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {seed!r}")

    covariance = _build("covariance", CovarianceSettings.from_options, _table(raw, "covariance"))

    solver_table = _table(raw, "solver")
    solver_table.setdefault("seed", seed)
    solver = _build("solver", SolverConfig.from_options, solver_table)
    schema = _build("data", DatasetSchema.from_options, _table(raw, "data")) if "data" in raw else None
    oracle = _build("oracle", QuadratureRule.from_options, _table(raw, "oracle"))

    simulation = None
    if "simulation" in raw:
        sim_table = _table(raw, "simulation")
        sim_table.setdefault("family", family.value)
        sim_table.setdefault("seed", seed)
        simulation = _build(
            "simulation", partial(SimConfig.from_options, solver), sim_table
        )

    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output", f"must be a string, got {output!r}")

    return RunConfig(
        family=family,
        covariance=covariance,
        solver=solver,
        schema=schema,
        oracle=oracle,
        simulation=simulation,
        seed=seed,
        output=output,
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Load and validate a TOML run configuration.

    Raises:
        FileNotFoundError: path does not exist
        ConfigError: invalid TOML, unknown key, missing family or invalid value
    """
    raw = _read_toml(path)
    config = parse_config(raw)
    logger.info(f"Loaded configuration {path}: {summarize_config(raw)}")
    return config


def load_schema(path: Union[str, Path]) -> DatasetSchema:
    """
    Load a DatasetSchema from a TOML file holding a [data] table.

    Raises:
        ConfigError: missing [data] table, unknown key or invalid value
    """
    raw = _read_toml(path)
    _check_keys(raw, ("data",), "")
    if "data" not in raw:
        raise ConfigError("data", "required")
    return _build("data", DatasetSchema.from_options, _table(raw, "data"))


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    starts: Optional[List[Tuple[float, ...]]] = None,
    fix_omega3: Optional[bool] = None,
    oracle_nodes: Optional[int] = None,
    threads: Optional[int] = None,
) -> RunConfig:
    """
    Apply command-line overrides on top of a loaded configuration.

    Raises:
        ConfigError: an override is invalid for the configuration
    """
    covariance, solver, oracle, simulation = (
        config.covariance, config.solver, config.oracle, config.simulation
    )
    try:
        if fix_omega3 is not None:
            covariance = covariance.with_omega3_fixed(fix_omega3)
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if starts is not None:
            changes["starts"] = starts
        if threads is not None:
            changes["threads"] = threads
        solver = replace(solver, **changes)
        if oracle_nodes is not None:
            oracle = replace(oracle, nodes_per_dim=oracle_nodes)
        if simulation is not None:
            sim_changes: Dict[str, Any] = {"solver": solver}
            if seed is not None:
                sim_changes["seed"] = seed
            if threads is not None:
                sim_changes["threads"] = threads
            simulation = replace(simulation, **sim_changes)
    except (ValueError, TypeError) as e:
        raise ConfigError("command line", str(e))
    return replace(
        config,
        covariance=covariance,
        solver=solver,
        oracle=oracle,
        simulation=simulation,
        seed=config.seed if seed is None else seed,
    )
