"""Seeded synthetic data and independent brute-force oracles.

Everything here is a pure function of (config, seed) via a splittable
counter-based generator (numpy Philox, four independent streams spawned
from the seed). The oracles re-evaluate likelihoods and covariance
formulas from scratch and deliberately import nothing from the estimator
module, so a bug there cannot hide in here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import (
    CountryYearAttributes,
    BilateralTradeRecord,
    IndicatorFlags,
    SectorMap,
    TariffLine,
    TradeFlowRecord,
)
from .errors import BoundaryMaximum, MeanOverflow, SingularBread
from . import ingest
from .remoteness import write_distances

#: Algorithm identifier recorded in bundle metadata.
RNG_ALGORITHM = "philox4x64"

_STREAM_ATTRS, _STREAM_FLOWS, _STREAM_BILATERAL, _STREAM_TARIFFS = range(4)

#: CN chapter prefixes cycled over synthetic goods, one per sector label.
_CN_PREFIXES = ("01", "25", "16", "50", "44", "28", "72", "95")

_PREFIX_SECTORS = {
    "01": "Agriculture/Forestry/Fishing",
    "25": "Mining/Quarrying",
    "16": "Food/Beverage",
    "50": "Textiles",
    "44": "Wood/Paper",
    "28": "Chemicals/Pharma/Rubber",
    "72": "Metals/Machinery",
    "95": "OtherProducts",
}

_DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "gdp": (1e9, 1e12),
    "population": (1e5, 1e8),
    "area_km2": (1e3, 1e7),
    "distance_km": (1e2, 2e4),
    "religion_share": (0.05, 1.0),
}

#: Synthetic means above this raise rather than silently saturate.
_MAX_MEAN = 1e15


@dataclass(frozen=True)
class SynthConfig:
    n_countries: int
    years: tuple[int, int]              # inclusive span
    seed: int
    beta_true: Mapping[str, float]
    family: str = "poisson"             # poisson | nb2 | lognormal
    alpha: float = 0.0                  # nb2 dispersion
    sigma: float = 0.0                  # lognormal disturbance scale
    n_goods: int = 1
    with_volumes: bool = True
    ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: dict(_DEFAULT_RANGES))

    def __post_init__(self):
        if self.n_countries < 3:
            raise ValueError("need at least 3 countries (GB-like, NI-like, rest)")
        if self.years[0] > self.years[1]:
            raise ValueError("years span is reversed")
        if self.family not in ("poisson", "nb2", "lognormal"):
            raise ValueError(f"unknown family '{self.family}'")
        if self.family == "nb2" and not self.alpha > 0:
            raise ValueError("nb2 requires alpha > 0")
        for name, (lo, hi) in self.ranges.items():
            if not (0 < lo <= hi):
                raise ValueError(f"range for {name} must be positive")

    def year_list(self) -> list[int]:
        return list(range(self.years[0], self.years[1] + 1))


def _stream(config: SynthConfig, index: int) -> np.random.Generator:
    children = np.random.SeedSequence(config.seed).spawn(4)
    return np.random.Generator(np.random.Philox(children[index]))


def country_codes(n: int) -> list[str]:
    """GB-like and NI-like first, then a deterministic two-letter sequence."""
    codes = ["GB", "NI"]
    i = 0
    while len(codes) < n:
        code = chr(65 + i // 26) + chr(65 + i % 26)
        i += 1
        if code in ("GB", "NI"):
            continue
        codes.append(code)
    return codes


def generate_attributes(config: SynthConfig) -> list[CountryYearAttributes]:
    rng = _stream(config, _STREAM_ATTRS)
    rr = config.ranges

    def log_uniform(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    out = []
    for iso in country_codes(config.n_countries):
        area = log_uniform(*rr["area_km2"])
        distance = log_uniform(*rr["distance_km"])
        religion = float(rng.uniform(*rr["religion_share"]))
        if iso == "GB":
            flags = IndicatorFlags(gb=True, eu=True, gatt_wto=True,
                                   english=True, legal=True)
        elif iso == "NI":
            flags = IndicatorFlags(ni=True, eu=True, gatt_wto=True,
                                   english=True, legal=True)
        else:
            eu = bool(rng.random() < 0.4)
            flags = IndicatorFlags(
                eu=eu,
                euro=bool(eu and rng.random() < 0.6),
                gatt_wto=bool(rng.random() < 0.8),
                english=bool(rng.random() < 0.3),
                legal=bool(rng.random() < 0.3),
            )
        for year in config.year_list():
            out.append(CountryYearAttributes(
                iso=iso, year=year,
                gdp=log_uniform(*rr["gdp"]),
                population=log_uniform(*rr["population"]),
                area_km2=area, distance_km=distance,
                religion_share=religion, flags=flags))
    return out


def _term_value(name: str, a: CountryYearAttributes) -> float:
    if name == "intercept":
        return 1.0
    if name.startswith("log_"):
        base = name[4:]
        if base == "time":
            return math.log(a.year - 1992)
        return math.log(a.continuous(base))
    return float(a.flags.get(name))


def goods_cn8(index: int) -> str:
    return _CN_PREFIXES[index % len(_CN_PREFIXES)] + f"{index:06d}"


def generate_flows(attrs: Sequence[CountryYearAttributes],
                   config: SynthConfig) -> list[TradeFlowRecord]:
    """Draw flows with mean exp(x . beta_true) under the configured family.

    With several goods per destination-year the cell mean is split evenly
    across them, so country-level aggregates keep the intended mean (and,
    for the Poisson family, the exact distribution).
    """
    rng = _stream(config, _STREAM_FLOWS)
    out = []
    for a in attrs:
        eta = sum(b * _term_value(name, a) for name, b in config.beta_true.items())
        mu = math.exp(eta) if eta < 700 else math.inf
        if not mu < _MAX_MEAN:
            raise MeanOverflow(f"mean {mu:.3g} for ({a.iso}, {a.year})")
        for g in range(config.n_goods):
            mu_g = mu / config.n_goods
            if config.family == "poisson":
                value_eur = int(rng.poisson(mu_g))
            elif config.family == "nb2":
                shape = 1.0 / config.alpha
                p = shape / (shape + mu_g)
                value_eur = int(rng.negative_binomial(shape, p))
            else:
                value_eur = int(math.floor(
                    mu_g * math.exp(config.sigma * rng.standard_normal()) + 0.5))
            cents = value_eur * 100
            volume = None
            if config.with_volumes:
                volume = value_eur / (1.0 + g % 7)
            out.append(TradeFlowRecord(year=a.year, destination=a.iso,
                                       cn8=goods_cn8(g), value_cents=cents,
                                       volume=volume))
    return out


def generate_bilateral(config: SynthConfig) -> list[BilateralTradeRecord]:
    """World trade table among the destination countries, every ordered pair."""
    rng = _stream(config, _STREAM_BILATERAL)
    codes = country_codes(config.n_countries)
    out = []
    for year in config.year_list():
        for reporter in codes:
            for partner in codes:
                if reporter == partner:
                    continue
                value = float(np.exp(rng.uniform(np.log(1e6), np.log(1e9))))
                out.append(BilateralTradeRecord(
                    year=year, reporter=reporter, partner=partner,
                    flow_value_cents=int(value * 100)))
    return out


def generate_tariffs(config: SynthConfig) -> list[TariffLine]:
    """One schedule line per synthetic good; roughly a third duty-free."""
    rng = _stream(config, _STREAM_TARIFFS)
    out = []
    seen = set()
    for g in range(config.n_goods):
        hs6 = goods_cn8(g)[:6]
        if hs6 in seen:
            continue
        seen.add(hs6)
        rate = 0.0 if rng.random() < 0.3 else float(rng.uniform(0.01, 0.5))
        out.append(TariffLine(hs6=hs6, rate=rate))
    return out


def default_sector_map() -> SectorMap:
    return SectorMap(dict(_PREFIX_SECTORS))


def write_bundle(directory, config: SynthConfig, exporter: str = "IE") -> dict:
    """Emit a full CSV bundle in the exact schemas the readers consume."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    attrs = generate_attributes(config)
    flows = generate_flows(attrs, config)
    bilateral = generate_bilateral(config)
    tariffs = generate_tariffs(config)

    paths = {
        "flows": directory / "flows.csv",
        "attrs": directory / "attrs.csv",
        "bilateral": directory / "bilateral.csv",
        "tariffs": directory / "tariffs.csv",
        "sectors": directory / "sectors.csv",
        "distances": directory / "distances.csv",
        "meta": directory / "bundle_meta.json",
    }
    ingest.write_trade_flows(paths["flows"], flows)
    ingest.write_attributes(paths["attrs"], attrs)
    ingest.write_bilateral(paths["bilateral"], bilateral)
    ingest.write_tariffs(paths["tariffs"], tariffs)
    ingest.write_sector_map(paths["sectors"], default_sector_map())

    by_iso = {}
    for a in attrs:
        by_iso.setdefault(a.iso, a.distance_km)
    write_distances(paths["distances"],
                    {(exporter, iso): d for iso, d in by_iso.items()})

    meta = {
        "rng": RNG_ALGORITHM,
        "seed": config.seed,
        "exporter": exporter,
        "config": {
            "n_countries": config.n_countries,
            "years": list(config.years),
            "beta_true": dict(config.beta_true),
            "family": config.family,
            "alpha": config.alpha,
            "sigma": config.sigma,
            "n_goods": config.n_goods,
        },
    }
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


# ---------------------------------------------------------------------------
# oracles (independent of the estimator module)

def oracle_mle_grid(design, bounds, coarse_step: float,
                    refine_rounds: int = 6) -> np.ndarray:
    """Maximize the Poisson log-likelihood by nested grid refinement.

    ``bounds`` is one (lo, hi) pair applied to every coefficient or a
    sequence of per-coefficient pairs; at most 3 free coefficients. The
    grid is refined tenfold per round until the step is <= 1e-4. A maximum
    on the original search-box edge raises BoundaryMaximum.
    """
    y = np.asarray(design.y, dtype=float)
    X = np.asarray(design.X, dtype=float)
    p = X.shape[1]
    if p > 3:
        raise ValueError("grid oracle supports at most 3 free coefficients")
    if isinstance(bounds[0], (int, float)):
        box = [(float(bounds[0]), float(bounds[1]))] * p
    else:
        box = [(float(lo), float(hi)) for lo, hi in bounds]
        if len(box) != p:
            raise ValueError("one (lo, hi) pair per coefficient required")

    def loglik(grid_points):
        eta = X @ grid_points.T                      # (n, G)
        np.clip(eta, -700.0, 700.0, out=eta)
        return y @ eta - np.exp(eta).sum(axis=0)     # gammaln term constant

    step = float(coarse_step)
    centre = None
    current = list(box)
    for _ in range(refine_rounds + 1):
        axes = [np.arange(lo, hi + step / 2, step) for lo, hi in current]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.column_stack([m.ravel() for m in mesh])
        best = int(np.argmax(loglik(pts)))
        centre = pts[best]
        for j in range(p):
            if (abs(centre[j] - box[j][0]) < step / 2
                    or abs(centre[j] - box[j][1]) < step / 2):
                raise BoundaryMaximum(
                    f"grid maximum at the edge of the search box in dim {j}")
        if step <= 1e-4:
            return centre
        current = [(max(box[j][0], centre[j] - step),
                    min(box[j][1], centre[j] + step)) for j in range(p)]
        step /= 10.0
    raise ValueError("refine_rounds too small to reach step 1e-4")


def oracle_sandwich(design, coefficients, clusters=None, family: str = "poisson",
                    alpha: float = 0.0) -> np.ndarray:
    """Literal evaluation of the cluster sandwich, written with plain loops.

    bread = (sum_i w_i x_i x_i')^-1, meat = sum_g s_g s_g' over per-cluster
    score sums, result scaled by G/(G-1).
    """
    X = np.asarray(design.X, dtype=float)
    y = np.asarray(design.y, dtype=float)
    if isinstance(coefficients, Mapping):
        beta = np.array([coefficients[name] for name in design.columns])
    else:
        beta = np.asarray(coefficients, dtype=float)
    if clusters is None:
        clusters = design.clusters
    n, p = X.shape

    weights = np.empty(n)
    resid = np.empty(n)
    for i in range(n):
        eta_i = float(X[i] @ beta)
        if family == "poisson":
            mu_i = math.exp(eta_i)
            weights[i] = mu_i
            resid[i] = y[i] - mu_i
        elif family == "ols":
            weights[i] = 1.0
            resid[i] = y[i] - eta_i
        elif family == "nb2":
            mu_i = math.exp(eta_i)
            weights[i] = mu_i / (1.0 + alpha * mu_i)
            resid[i] = (y[i] - mu_i) / (1.0 + alpha * mu_i)
        else:
            raise ValueError(f"unknown family '{family}'")

    bread_inv = np.zeros((p, p))
    for i in range(n):
        for j in range(p):
            for k in range(p):
                bread_inv[j, k] += weights[i] * X[i, j] * X[i, k]
    try:
        bread = np.linalg.inv(bread_inv)
    except np.linalg.LinAlgError as exc:
        raise SingularBread(str(exc)) from None

    sums: dict[object, np.ndarray] = {}
    for i in range(n):
        s = sums.setdefault(clusters[i], np.zeros(p))
        for j in range(p):
            s[j] += X[i, j] * resid[i]
    meat = np.zeros((p, p))
    for s in sums.values():
        for j in range(p):
            for k in range(p):
                meat[j, k] += s[j] * s[k]

    g = len(sums)
    cov = (g / (g - 1)) * bread @ meat @ bread
    return (cov + cov.T) / 2.0
