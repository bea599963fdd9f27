"""Core value types shared by every module.

Money is carried as integer euro cents so aggregation is exact; values are
converted to floats only inside the numeric kernels. All types here are
frozen and safe to share across concurrent workers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import BadCode, FlagConflict, NegativeValue, NoSectorMatch

_ISO_RE = re.compile(r"^[A-Z]{2,3}$")
_CN8_RE = re.compile(r"^[0-9]{8}$")
_HS6_RE = re.compile(r"^[0-9]{6}$")

#: Order matches the indicator list used throughout the coefficient tables.
INDICATOR_NAMES = ("gb", "ni", "gatt_wto", "english", "eu", "euro", "legal")

#: Continuous gravity covariates, each entered under a natural log.
CONTINUOUS_ATTRIBUTES = ("gdp", "population", "area_km2", "distance_km",
                         "religion_share")

SECTOR_LABELS = (
    "Agriculture/Forestry/Fishing",
    "Mining/Quarrying",
    "Food/Beverage",
    "Textiles",
    "Wood/Paper",
    "Chemicals/Pharma/Rubber",
    "Metals/Machinery",
    "OtherProducts",
)

#: Aggregate pseudo-sector: the union of all records, not a mapping entry.
ALL_SECTORS = "AllSectors"


def validate_iso(code: str, *, what: str = "country code") -> str:
    if not _ISO_RE.match(code):
        raise BadCode(f"{what} '{code}' is not a 2-3 letter alpha code")
    return code


def eur_cents(value_cents: int, *, what: str = "value") -> int:
    if value_cents < 0:
        raise NegativeValue(f"{what} is negative ({value_cents} cents)")
    return value_cents


@dataclass(frozen=True)
class TradeFlowRecord:
    """One export observation at the 8-digit commodity level."""

    year: int
    destination: str
    cn8: str
    value_cents: int
    volume: float | None = None

    def __post_init__(self):
        validate_iso(self.destination, what="destination")
        if not _CN8_RE.match(self.cn8):
            raise BadCode(f"cn8 '{self.cn8}' is not exactly 8 digits")
        eur_cents(self.value_cents)
        if self.volume is not None and self.volume < 0:
            raise NegativeValue(f"volume is negative ({self.volume})")

    @property
    def hs6(self) -> str:
        """6-digit prefix; the tariff-schedule key for this commodity."""
        return self.cn8[:6]


@dataclass(frozen=True)
class IndicatorFlags:
    """The seven destination indicator variables."""

    gb: bool = False
    ni: bool = False
    gatt_wto: bool = False
    english: bool = False
    eu: bool = False
    euro: bool = False
    legal: bool = False

    def __post_init__(self):
        if self.gb and self.ni:
            raise FlagConflict("gb and ni cannot both be set")

    def get(self, name: str) -> bool:
        if name not in INDICATOR_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def as_dict(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class CountryYearAttributes:
    """Gravity covariates and indicator flags for one destination-year."""

    iso: str
    year: int
    gdp: float
    population: float
    area_km2: float
    distance_km: float
    religion_share: float
    flags: IndicatorFlags = field(default_factory=IndicatorFlags)

    def __post_init__(self):
        validate_iso(self.iso)
        for name in ("gdp", "population", "area_km2", "distance_km"):
            v = getattr(self, name)
            if not (v > 0) or not math.isfinite(v):
                raise NegativeValue(f"{name} must be strictly positive, got {v}")
        # Zero is tolerated here; the merge step clamps it to a floor before
        # any log transform and reports the clamp count.
        if not (0.0 <= self.religion_share <= 1.0):
            raise NegativeValue(
                f"religion_share must lie in [0, 1], got {self.religion_share}"
            )

    def continuous(self, name: str) -> float:
        if name not in CONTINUOUS_ATTRIBUTES:
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True)
class BilateralTradeRecord:
    """One reporter-to-partner flow from the world bilateral trade table."""

    year: int
    reporter: str
    partner: str
    flow_value_cents: int

    def __post_init__(self):
        validate_iso(self.reporter, what="reporter")
        validate_iso(self.partner, what="partner")
        if self.reporter == self.partner:
            raise BadCode(f"reporter and partner are both '{self.reporter}'")
        eur_cents(self.flow_value_cents, what="flow_value")


@dataclass(frozen=True)
class TariffLine:
    """Ad-valorem rate for one 6-digit commodity heading."""

    hs6: str
    rate: float

    def __post_init__(self):
        if not _HS6_RE.match(self.hs6):
            raise BadCode(f"hs6 '{self.hs6}' is not exactly 6 digits")
        if self.rate < 0:
            raise NegativeValue(f"tariff rate is negative ({self.rate})")


class SectorMap:
    """Longest-prefix lookup from CN codes to the eight sector labels."""

    def __init__(self, mapping: dict[str, str]):
        for prefix, label in mapping.items():
            if not re.match(r"^[0-9]{2,8}$", prefix):
                raise BadCode(f"sector prefix '{prefix}' is not 2-8 digits")
            if label not in SECTOR_LABELS:
                raise BadCode(f"unknown sector label '{label}'")
        self._mapping = dict(mapping)

    @property
    def mapping(self) -> dict[str, str]:
        return dict(self._mapping)

    def __len__(self) -> int:
        return len(self._mapping)

    def __eq__(self, other) -> bool:
        return isinstance(other, SectorMap) and self._mapping == other._mapping

    def sector_of(self, cn8: str) -> str:
        return sector_of(cn8, self)


def sector_of(cn8: str, sector_map: SectorMap) -> str:
    """Resolve a CN8 code to its sector by longest matching prefix."""
    if not _CN8_RE.match(cn8):
        raise BadCode(f"cn8 '{cn8}' is not exactly 8 digits")
    mapping = sector_map._mapping
    for n in range(8, 1, -1):
        label = mapping.get(cn8[:n])
        if label is not None:
            return label
    raise NoSectorMatch(f"no sector prefix matches cn8 '{cn8}'")


@dataclass(frozen=True)
class GravityObservation:
    """One merged regression row: an aggregated flow cell plus attributes."""

    year: int
    iso: str
    value_cents: int
    attrs: CountryYearAttributes
    sector: str | None = None
    cn8: str | None = None
    volume: float | None = None
    remoteness: float | None = None

    def __post_init__(self):
        eur_cents(self.value_cents)
        if self.attrs.iso != self.iso or self.attrs.year != self.year:
            raise ValueError(
                f"attribute key ({self.attrs.iso}, {self.attrs.year}) does not "
                f"match flow cell ({self.iso}, {self.year})"
            )

    @property
    def value_eur(self) -> float:
        return self.value_cents / 100.0


@dataclass(frozen=True)
class FitResult:
    """Estimator output: coefficients, covariances, diagnostics."""

    estimator: str                      # "OLS" | "PPML" | "NBPML"
    coefficients: dict[str, float]      # name -> estimate, column order
    covariance_model: np.ndarray | None
    covariance_robust: np.ndarray | None
    cv_per_coef: dict[str, float | None]
    loglik: float
    deviance: float
    null_deviance: float
    n_obs: int
    n_dropped_zeros: int
    converged: bool
    iterations: int
    pseudo_r2: float | None = None
    r2_adjusted: float | None = None
    dispersion: float | None = None
    n_clusters: int | None = None
    small_sample_factor: float | None = None

    def __post_init__(self):
        for name, cov in (("covariance_model", self.covariance_model),
                          ("covariance_robust", self.covariance_robust)):
            if cov is None:
                continue
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-8 * (1 + np.abs(cov).max())):
                raise ValueError(f"{name} is not symmetric")
            if np.any(np.diag(cov) < -1e-12):
                raise ValueError(f"{name} has a negative diagonal entry")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.coefficients)

    def robust_se(self, name: str) -> float:
        if self.covariance_robust is None:
            raise ValueError("robust covariance was withheld for this fit")
        i = self.names.index(name)
        return float(np.sqrt(max(self.covariance_robust[i, i], 0.0)))

    def to_json_dict(self) -> dict:
        def mat(m):
            return None if m is None else [[float(v) for v in row] for row in m]

        return {
            "estimator": self.estimator,
            "coefficients": {k: float(v) for k, v in self.coefficients.items()},
            "covariance_model": mat(self.covariance_model),
            "covariance_robust": mat(self.covariance_robust),
            "cv_per_coef": {k: (None if v is None else float(v))
                            for k, v in self.cv_per_coef.items()},
            "loglik": self.loglik,
            "deviance": self.deviance,
            "null_deviance": self.null_deviance,
            "pseudo_r2": self.pseudo_r2,
            "r2_adjusted": self.r2_adjusted,
            "dispersion": self.dispersion,
            "n_obs": self.n_obs,
            "n_dropped_zeros": self.n_dropped_zeros,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_clusters": self.n_clusters,
            "small_sample_factor": self.small_sample_factor,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FitResult":
        def mat(m):
            return None if m is None else np.asarray(m, dtype=float)

        return cls(
            estimator=d["estimator"],
            coefficients=dict(d["coefficients"]),
            covariance_model=mat(d["covariance_model"]),
            covariance_robust=mat(d["covariance_robust"]),
            cv_per_coef=dict(d["cv_per_coef"]),
            loglik=d["loglik"],
            deviance=d["deviance"],
            null_deviance=d["null_deviance"],
            pseudo_r2=d.get("pseudo_r2"),
            r2_adjusted=d.get("r2_adjusted"),
            dispersion=d.get("dispersion"),
            n_obs=d["n_obs"],
            n_dropped_zeros=d["n_dropped_zeros"],
            converged=d["converged"],
            iterations=d["iterations"],
            n_clusters=d.get("n_clusters"),
            small_sample_factor=d.get("small_sample_factor"),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, FitResult):
            return NotImplemented
        return self.to_json_dict() == other.to_json_dict()
