"""Turn a declarative model spec plus a merged dataset into y, X, clusters.

Column order is fixed: intercept, continuous logs, time, indicators,
remoteness block, importer fixed effects. Natural logarithms throughout.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .datamodel import (
    CONTINUOUS_ATTRIBUTES,
    GravityObservation,
    INDICATOR_NAMES,
)
from .errors import (
    AllZeroResponse,
    InputError,
    MissingRemoteness,
    NonPositiveUnderLog,
    RankDeficient,
)

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

#: Relative pivot tolerance for the rank check.
RANK_RTOL = 1e-10

#: Offset for the time regressor log(year - TIME_ORIGIN).
TIME_ORIGIN = 1992


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model definition.

    ``response_scale`` selects the estimator family's response: "natural"
    keeps values (PPML/NBPML), "log" drops zero rows and logs (OLS).
    ``time_term`` and ``remoteness_terms`` are mutually exclusive: the
    per-year remoteness block absorbs time effects.
    """

    response_scale: str = "natural"
    continuous: tuple[str, ...] = ()
    time_term: bool = False
    indicators: tuple[str, ...] = ()
    remoteness_terms: bool = False
    remoteness_single_column: bool = False
    importer_fixed_effects: bool = False
    intercept: bool = True
    cluster_by: str = "destination"

    def __post_init__(self):
        if self.response_scale not in ("natural", "log"):
            raise InputError(f"unknown response_scale '{self.response_scale}'")
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "indicators", tuple(self.indicators))
        for name in self.continuous:
            if name not in CONTINUOUS_ATTRIBUTES:
                raise InputError(f"unknown continuous attribute '{name}'")
        for name in self.indicators:
            if name not in INDICATOR_NAMES:
                raise InputError(f"unknown indicator '{name}'")
        if len(set(self.continuous)) != len(self.continuous):
            raise InputError("duplicate continuous attribute in spec")
        if len(set(self.indicators)) != len(self.indicators):
            raise InputError("duplicate indicator in spec")
        if self.time_term and self.remoteness_terms:
            raise InputError(
                "time_term and remoteness_terms are mutually exclusive: the "
                "remoteness block absorbs time effects")
        if self.cluster_by != "destination":
            raise InputError("only clustering by destination is supported")

    def to_dict(self) -> dict:
        return {
            "response_scale": self.response_scale,
            "continuous": list(self.continuous),
            "time_term": self.time_term,
            "indicators": list(self.indicators),
            "remoteness_terms": self.remoteness_terms,
            "remoteness_single_column": self.remoteness_single_column,
            "importer_fixed_effects": self.importer_fixed_effects,
            "intercept": self.intercept,
            "cluster_by": self.cluster_by,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {"response_scale", "continuous", "time_term", "indicators",
                 "remoteness_terms", "remoteness_single_column",
                 "importer_fixed_effects", "intercept", "cluster_by"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown model spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("continuous", "indicators"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ModelSpec":
        """Load from a JSON or TOML config file (chosen by extension)."""
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                raw = _toml.load(fh)
        else:
            with open(path, "r", encoding="utf-8") as fh:
                try:
                    raw = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: model spec must be a table/object")
        return cls.from_dict(raw)


@dataclass(frozen=True)
class DesignMatrix:
    """Realized numeric regression problem with named columns."""

    y: np.ndarray
    X: np.ndarray
    columns: tuple[str, ...]
    clusters: tuple[str, ...]
    spec_echo: ModelSpec
    n_dropped_zeros: int = 0
    reference_country: str | None = None
    row_keys: tuple = field(default=())

    def __post_init__(self):
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError("y length does not match X row count")
        if len(self.columns) != self.X.shape[1]:
            raise ValueError("column names do not match X column count")
        if len(self.clusters) != self.X.shape[0]:
            raise ValueError("cluster labels do not match X row count")

    @property
    def n_obs(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_params(self) -> int:
        return int(self.X.shape[1])

    def column_index(self, name: str) -> int:
        return self.columns.index(name)


def check_rank(X: np.ndarray, columns: Sequence[str]) -> None:
    """Pivoted-QR rank check; names the offending columns on failure."""
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(columns[X.shape[0]:])
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    pivots = np.abs(np.diag(R))
    if pivots.size == 0:
        return
    tol = RANK_RTOL * pivots[0]
    rank = int(np.sum(pivots > tol))
    if rank < X.shape[1]:
        offenders = [columns[j] for j in sorted(piv[rank:])]
        raise RankDeficient(offenders)


def build_design(dataset: Sequence[GravityObservation], spec: ModelSpec) -> DesignMatrix:
    """Build the response vector, regressor matrix, and cluster labels.

    Rows keep the dataset's order; with a log response, zero-value rows are
    removed first and the removal count recorded. Remoteness enters as a
    log(r_t) x year-dummy block by default, one column per year; importer
    fixed effects drop the lexicographically first ISO as reference.
    """
    if len(dataset) == 0:
        raise AllZeroResponse("dataset has no observations")

    rows = list(dataset)
    n_dropped = 0
    if spec.response_scale == "log":
        kept = [o for o in rows if o.value_cents > 0]
        n_dropped = len(rows) - len(kept)
        rows = kept
        if not rows:
            raise AllZeroResponse("all response values are zero")
    else:
        if all(o.value_cents == 0 for o in rows):
            raise AllZeroResponse("all response values are zero")

    values = np.array([o.value_cents for o in rows], dtype=float) / 100.0
    y = np.log(values) if spec.response_scale == "log" else values

    cols: list[np.ndarray] = []
    names: list[str] = []

    if spec.intercept:
        cols.append(np.ones(len(rows)))
        names.append("intercept")

    for attr in spec.continuous:
        raw = np.empty(len(rows))
        for i, o in enumerate(rows):
            v = o.attrs.continuous(attr)
            if not v > 0:
                raise NonPositiveUnderLog(attr, row=i)
            raw[i] = v
        cols.append(np.log(raw))
        names.append(f"log_{attr}")

    if spec.time_term:
        t = np.empty(len(rows))
        for i, o in enumerate(rows):
            if o.year <= TIME_ORIGIN:
                raise NonPositiveUnderLog("time", row=i)
            t[i] = o.year - TIME_ORIGIN
        cols.append(np.log(t))
        names.append("log_time")

    for name in spec.indicators:
        cols.append(np.array([float(o.attrs.flags.get(name)) for o in rows]))
        names.append(name)

    if spec.remoteness_terms:
        years = sorted({o.year for o in rows})
        log_r = {}
        for o in rows:
            if o.remoteness is None:
                raise MissingRemoteness(o.year)
            if not o.remoteness > 0:
                raise NonPositiveUnderLog("remoteness")
            log_r.setdefault(o.year, math.log(o.remoteness))
        if spec.remoteness_single_column:
            cols.append(np.array([log_r[o.year] for o in rows]))
            names.append("log_remoteness")
        else:
            for year in years:
                cols.append(np.array(
                    [log_r[year] if o.year == year else 0.0 for o in rows]))
                names.append(f"log_remoteness_{year}")

    reference = None
    if spec.importer_fixed_effects:
        countries = sorted({o.iso for o in rows})
        reference = countries[0]
        for iso in countries[1:]:
            cols.append(np.array([1.0 if o.iso == iso else 0.0 for o in rows]))
            names.append(f"fe_{iso}")

    if not cols:
        raise InputError("model spec produces an empty design")

    X = np.column_stack(cols)
    if len(set(names)) != len(names):
        raise InputError("duplicate design column names")
    check_rank(X, names)

    return DesignMatrix(
        y=y,
        X=X,
        columns=tuple(names),
        clusters=tuple(o.iso for o in rows),
        spec_echo=spec,
        n_dropped_zeros=n_dropped,
        reference_country=reference,
        row_keys=tuple((o.year, o.iso, o.sector, o.cn8) for o in rows),
    )
