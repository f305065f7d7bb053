"""
Delimited-text dataset ingestion.

A DatasetSchema names the columns that become y, the binomial trials, the fixed-effect
design X and the random-effect structure (site coordinates, explicit Z columns or a
grouping column). Problems are reported with 1-based data rows (header excluded).
"""
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import distance_matrix

if sys.version_info < (3, 11):
    from typing_extensions import Unpack
else:
    from typing import Unpack

from .errors import DataError
from .family import Family, GlmmData, check_data
from .typing import SchemaOptions

logger = logging.getLogger(__name__)

DELIMITERS = {"comma": ",", "tab": "\t", ",": ",", "\t": "\t", ";": ";"}


@dataclass
class DatasetSchema:
    """
    Column mapping for a dataset.

    Exactly one random-effect source must be given: `coordinates` (one effect per row,
    Z = I, distances from the coordinates), `z_columns` (explicit Z) or `group`
    (indicator Z, one effect per distinct value in order of first appearance).

    Attributes:
        response: Response column
        trials: Binomial trials column
        covariates: Fixed-effect columns (after the intercept)
        coordinates: Site coordinate columns
        z_columns: Explicit random-effect design columns
        group: Grouping column
        delimiter: Field separator: ",", "tab" or ";"
        intercept: Prepend a column of ones to X
        scale: Multiplicative factor per column, applied on load
    """
    response: str = "y"
    trials: Optional[str] = None
    covariates: Tuple[str, ...] = ()
    coordinates: Tuple[str, ...] = ()
    z_columns: Tuple[str, ...] = ()
    group: Optional[str] = None
    delimiter: str = ","
    intercept: bool = True
    scale: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate configuration after initialization"""
        self.covariates = tuple(self.covariates)
        self.coordinates = tuple(self.coordinates)
        self.z_columns = tuple(self.z_columns)
        if self.delimiter not in DELIMITERS:
            raise ValueError(
                f"Invalid delimiter: '{self.delimiter}'. Valid options: [',', 'tab', ';']"
            )
        self.delimiter = DELIMITERS[self.delimiter]

        sources = [bool(self.coordinates), bool(self.z_columns), self.group is not None]
        if sum(sources) != 1:
            raise ValueError(
                "exactly one of coordinates, z_columns or group must be given"
            )
        if not self.intercept and not self.covariates:
            raise ValueError("the model needs an intercept or at least one covariate")

        self.scale = {str(k): float(v) for k, v in self.scale.items()}
        unused = [c for c in self.scale if c not in self.columns]
        if unused:
            raise ValueError(f"scale refers to unused columns: {unused}")

    @classmethod
    def from_options(cls, **options: Unpack[SchemaOptions]) -> "DatasetSchema":
        """Build from a [data] option table"""
        return cls(**options)  # type: ignore[arg-type]

    @property
    def columns(self) -> List[str]:
        """Every referenced column, in a stable order"""
        names = [self.response]
        if self.trials is not None:
            names.append(self.trials)
        names.extend(self.covariates)
        names.extend(self.coordinates)
        names.extend(self.z_columns)
        return list(dict.fromkeys(names))


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    missing = np.flatnonzero(raw.isna().to_numpy())
    if missing.size:
        raise DataError("missing value", row=int(missing[0]) + 1, column=column)
    values = pd.to_numeric(raw, errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy())
    if bad.size:
        i = int(bad[0])
        raise DataError(f"non-numeric value '{raw.iloc[i]}'", row=i + 1, column=column)
    return values.to_numpy(dtype=float)


def _indicator(labels: pd.Series) -> Tuple[np.ndarray, List[str]]:
    missing = np.flatnonzero(labels.isna().to_numpy())
    if missing.size:
        raise DataError("missing value", row=int(missing[0]) + 1, column=str(labels.name))
    codes, levels = pd.factorize(labels, sort=False)
    Z = np.zeros((labels.shape[0], len(levels)))
    Z[np.arange(labels.shape[0]), codes] = 1.0
    return Z, [str(level) for level in levels]


def load_dataset(
    path: Union[str, Path], schema: DatasetSchema, family: Optional[Family] = None
) -> GlmmData:
    """
    Read a delimited file with a header row into GlmmData.

    Args:
        path: Dataset file
        schema: Column mapping
        family: If given, family-specific checks run too (binomial y ≤ m)

    Raises:
        FileNotFoundError: path does not exist
        DataError: missing column, missing or non-numeric cell, invalid counts, y > m
    """
    try:
        frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty")
    except pd.errors.ParserError as e:
        raise DataError(f"cannot parse {path}: {e}")
    frame.columns = [str(c).strip() for c in frame.columns]

    required = schema.columns + ([schema.group] if schema.group is not None else [])
    for column in required:
        if column not in frame.columns:
            raise DataError(
                f"column not found (available: {', '.join(frame.columns)})", column=column
            )
    if frame.shape[0] == 0:
        raise DataError(f"{path} has no data rows")

    values = {c: _numeric(frame, c) * schema.scale.get(c, 1.0) for c in schema.columns}

    n = frame.shape[0]
    X_cols = [values[c] for c in schema.covariates]
    x_names = list(schema.covariates)
    if schema.intercept:
        X_cols.insert(0, np.ones(n))
        x_names.insert(0, "intercept")

    coords = distances = None
    if schema.coordinates:
        coords = np.column_stack([values[c] for c in schema.coordinates])
        distances = distance_matrix(coords, coords)
        Z = np.eye(n)
    elif schema.z_columns:
        Z = np.column_stack([values[c] for c in schema.z_columns])
    else:
        Z, levels = _indicator(frame[schema.group])
        logger.info(f"Group column '{schema.group}' has {len(levels)} levels")

    data = GlmmData(
        y=values[schema.response],
        X=np.column_stack(X_cols),
        Z=Z,
        trials=values[schema.trials] if schema.trials is not None else None,
        coords=coords,
        distances=distances,
        x_names=tuple(x_names),
    )
    if family is not None:
        check_data(family, data)
    logger.info(f"Loaded {path}: n={data.n}, p={data.p}, d={data.d}")
    return data
