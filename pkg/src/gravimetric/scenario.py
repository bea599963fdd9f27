"""Counterfactual transformations, re-estimation, and impact metrics.

Scenario composition: Soft flips the EU indicator off for the GB/NI
destinations; RegulatoryAlignment adds ad-valorem tariffs on GB only; Hard
adds them on GB and NI; LongTermHard replaces tariffs with market
substitution into the largest existing EU-27 outlet (tariff fallback where
no outlet exists). Each scenario is then re-estimated with the same model
spec, and impacts are measured against the Soft fit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .datamodel import (
    ALL_SECTORS,
    CountryYearAttributes,
    FitResult,
    SECTOR_LABELS,
    SectorMap,
    TariffLine,
    TradeFlowRecord,
    sector_of,
)
from .design import ModelSpec, build_design
from .errors import (
    AllZeroResponse,
    InputError,
    RateAbove100Pct,
    ZeroBaseline,
    ZeroBaseValue,
)
from .glm import EstimatorOptions, fit_nbpml, fit_ols, fit_ppml
from .ingest import AggregationLevel, aggregate, merge

GROUPS = ("GB", "NI", "EU27", "EU28", "World")


class ScenarioKind(str, Enum):
    BASELINE = "baseline"
    SOFT = "soft"
    REGULATORY_ALIGNMENT = "regalign"
    HARD = "hard"
    LONG_TERM_HARD = "longterm"


@dataclass(frozen=True)
class SubstitutionEntry:
    """Disposition of one input record under a scenario transformation."""

    year: int
    cn8: str
    old_dest: str
    disposition: str          # kept | tariffed | reassigned | reassigned_no_unit_value
    new_dest: str
    old_value_cents: int
    new_value_cents: int


@dataclass(frozen=True)
class ScenarioInputs:
    """Baseline data shared by every scenario of a run."""

    flows: tuple[TradeFlowRecord, ...]
    attrs: tuple[CountryYearAttributes, ...]
    tariffs: tuple[TariffLine, ...] = ()
    sector_map: SectorMap | None = None
    remoteness: Mapping[int, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        object.__setattr__(self, "attrs", tuple(self.attrs))
        object.__setattr__(self, "tariffs", tuple(self.tariffs))


@dataclass(frozen=True)
class ScenarioOutcome:
    kind: ScenarioKind
    sector: str
    flows: tuple[TradeFlowRecord, ...]
    attrs: tuple[CountryYearAttributes, ...]
    fit: FitResult
    substitution_log: tuple[SubstitutionEntry, ...]
    totals: dict                     # sector -> group -> cents
    n_tariff_rate_missing: int


def gb_destinations(attrs: Iterable[CountryYearAttributes]) -> set[str]:
    return {a.iso for a in attrs if a.flags.gb}


def ni_destinations(attrs: Iterable[CountryYearAttributes]) -> set[str]:
    return {a.iso for a in attrs if a.flags.ni}


def apply_soft(attrs: Sequence[CountryYearAttributes]) -> list[CountryYearAttributes]:
    """Set the EU indicator to zero on GB/NI rows; everything else intact."""
    out = []
    for a in attrs:
        if (a.flags.gb or a.flags.ni) and a.flags.eu:
            out.append(replace(a, flags=replace(a.flags, eu=False)))
        else:
            out.append(a)
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _rate_index(tariffs: Iterable[TariffLine]) -> dict[str, float]:
    index = {}
    for t in tariffs:
        index[t.hs6] = t.rate
    return index


def apply_tariffs(flows: Sequence[TradeFlowRecord],
                  tariffs: Iterable[TariffLine],
                  targets: set[str]) -> tuple[list[TradeFlowRecord], int]:
    """Reduce targeted values by the HS6 ad-valorem rate.

    Rows whose HS6 heading is absent from the schedule keep their value
    (rate 0) and are counted in the returned tally. A rate above 1.0 on an
    applicable row is an error. Untargeted rows come back unchanged
    (identical objects).
    """
    rates = _rate_index(tariffs)
    out = []
    n_missing = 0
    for rec in flows:
        if rec.destination not in targets:
            out.append(rec)
            continue
        rate = rates.get(rec.hs6)
        if rate is None:
            n_missing += 1
            out.append(rec)
            continue
        if rate > 1.0:
            raise RateAbove100Pct(
                f"rate {rate} for hs6 {rec.hs6} exceeds 100%")
        if rate == 0.0:
            out.append(rec)
            continue
        out.append(replace(rec, value_cents=_round_half_up(rec.value_cents * (1.0 - rate))))
    return out, n_missing


def _eu27_members(attrs: Iterable[CountryYearAttributes]) -> set[tuple[str, int]]:
    return {(a.iso, a.year) for a in attrs
            if a.flags.eu and not a.flags.gb and not a.flags.ni}


def apply_substitution(flows: Sequence[TradeFlowRecord],
                       attrs: Sequence[CountryYearAttributes],
                       tariffs: Iterable[TariffLine],
                       targets: set[str] | None = None,
                       ) -> tuple[list[TradeFlowRecord], list[SubstitutionEntry], int]:
    """Divert targeted flows to the strongest existing EU-27 outlet.

    For each (year, cn8) cell destined to a target, the record moves to the
    EU-27 destination with the largest existing value of that good-year
    (ties broken by lexicographic ISO) and is repriced at the candidate's
    unit value when volumes exist on both sides; without volumes the value
    is kept and the record flagged. Cells with no EU-27 outlet stay put and
    take the tariff instead. Every record gets exactly one log entry.
    """
    if targets is None:
        targets = gb_destinations(attrs) | ni_destinations(attrs)
    eu27 = _eu27_members(attrs)
    rates = _rate_index(tariffs)

    # Existing EU-27 outlets per (year, cn8): value/volume aggregated by
    # destination, positives only.
    candidate_cells = aggregate(
        [r for r in flows if (r.destination, r.year) in eu27],
        AggregationLevel.CN8)
    candidates: dict[tuple[int, str], list] = {}
    for cell in candidate_cells:
        if cell.value_cents > 0:
            candidates.setdefault((cell.year, cell.cn8), []).append(cell)

    out: list[TradeFlowRecord] = []
    log: list[SubstitutionEntry] = []
    n_missing = 0
    for rec in flows:
        if rec.destination not in targets:
            out.append(rec)
            log.append(SubstitutionEntry(rec.year, rec.cn8, rec.destination,
                                         "kept", rec.destination,
                                         rec.value_cents, rec.value_cents))
            continue
        cells = candidates.get((rec.year, rec.cn8))
        if cells:
            best = sorted(cells, key=lambda c: (-c.value_cents, c.destination))[0]
            if (rec.volume is not None and best.volume is not None
                    and best.volume > 0):
                unit_cents = best.value_cents / best.volume
                new_value = _round_half_up(rec.volume * unit_cents)
                disposition = "reassigned"
            else:
                new_value = rec.value_cents
                disposition = "reassigned_no_unit_value"
            out.append(replace(rec, destination=best.destination,
                               value_cents=new_value))
            log.append(SubstitutionEntry(rec.year, rec.cn8, rec.destination,
                                         disposition, best.destination,
                                         rec.value_cents, new_value))
        else:
            rate = rates.get(rec.hs6)
            if rate is None:
                n_missing += 1
                rate = 0.0
            if rate > 1.0:
                raise RateAbove100Pct(
                    f"rate {rate} for hs6 {rec.hs6} exceeds 100%")
            new_value = (rec.value_cents if rate == 0.0
                         else _round_half_up(rec.value_cents * (1.0 - rate)))
            out.append(rec if new_value == rec.value_cents
                       else replace(rec, value_cents=new_value))
            log.append(SubstitutionEntry(rec.year, rec.cn8, rec.destination,
                                         "tariffed", rec.destination,
                                         rec.value_cents, new_value))
    return out, log, n_missing


def group_totals(flows: Sequence[TradeFlowRecord],
                 attrs: Sequence[CountryYearAttributes],
                 sector_map: SectorMap | None) -> dict:
    """Value sums by sector x destination group.

    Group membership comes from the attributes passed here (normally the
    baseline ones, so EU-28 keeps including GB/NI after the indicator
    flip). Destinations without attributes count toward World only.
    """
    is_gb = {(a.iso, a.year) for a in attrs if a.flags.gb}
    is_ni = {(a.iso, a.year) for a in attrs if a.flags.ni}
    eu27 = _eu27_members(attrs)

    sectors = [ALL_SECTORS] + (list(SECTOR_LABELS) if sector_map is not None else [])
    totals = {s: {g: 0 for g in GROUPS} for s in sectors}

    for rec in flows:
        key = (rec.destination, rec.year)
        groups = ["World"]
        if key in is_gb:
            groups += ["GB", "EU28"]
        elif key in is_ni:
            groups += ["NI", "EU28"]
        elif key in eu27:
            groups += ["EU27", "EU28"]
        rows = [ALL_SECTORS]
        if sector_map is not None:
            rows.append(sector_of(rec.cn8, sector_map))
        for s in rows:
            for g in groups:
                totals[s][g] += rec.value_cents
    return totals


def transform(kind: ScenarioKind, inputs: ScenarioInputs):
    """Apply the scenario's data transformation; estimation comes separately.

    Returns (flows, attrs, substitution_log, n_tariff_rate_missing).
    """
    kind = ScenarioKind(kind)
    flows = list(inputs.flows)
    attrs = list(inputs.attrs)
    gb = gb_destinations(attrs)
    ni = ni_destinations(attrs)

    def kept_log(records):
        return [SubstitutionEntry(r.year, r.cn8, r.destination, "kept",
                                  r.destination, r.value_cents, r.value_cents)
                for r in records]

    if kind is ScenarioKind.BASELINE:
        return flows, attrs, kept_log(flows), 0

    attrs = apply_soft(attrs)
    if kind is ScenarioKind.SOFT:
        return flows, attrs, kept_log(flows), 0

    if kind is ScenarioKind.LONG_TERM_HARD:
        flows2, log, n_missing = apply_substitution(flows, attrs, inputs.tariffs,
                                                    targets=gb | ni)
        return flows2, attrs, log, n_missing

    targets = gb if kind is ScenarioKind.REGULATORY_ALIGNMENT else gb | ni
    flows2, n_missing = apply_tariffs(flows, inputs.tariffs, targets)
    log = []
    for old, new in zip(flows, flows2):
        disposition = "tariffed" if old.destination in targets else "kept"
        log.append(SubstitutionEntry(old.year, old.cn8, old.destination,
                                     disposition, new.destination,
                                     old.value_cents, new.value_cents))
    return flows2, attrs, log, n_missing


_FITTERS = {"ols": fit_ols, "ppml": fit_ppml, "nbpml": fit_nbpml}


def _fit_for(flows, attrs, inputs, spec, sector, estimator, options):
    if sector == ALL_SECTORS:
        cells = aggregate(flows, AggregationLevel.COUNTRY)
    else:
        if inputs.sector_map is None:
            raise InputError("sector-level estimation requires a sector map")
        cells = [c for c in aggregate(flows, AggregationLevel.SECTOR,
                                      inputs.sector_map)
                 if c.sector == sector]
        if not cells:
            raise AllZeroResponse(f"no flow cells for sector '{sector}'")
    observations, _ = merge(cells, attrs, inputs.remoteness)
    dm = build_design(observations, spec)
    if estimator not in _FITTERS:
        raise InputError(f"unknown estimator '{estimator}'")
    if estimator == "ols":
        return fit_ols(dm)
    return _FITTERS[estimator](dm, options)


def run_scenario(kind: ScenarioKind, inputs: ScenarioInputs, spec: ModelSpec,
                 *, sector: str = ALL_SECTORS, estimator: str = "ppml",
                 options: EstimatorOptions | None = None) -> ScenarioOutcome:
    """Transform the data for one scenario and re-estimate the same spec."""
    outcomes = run_scenario_suite(kind, inputs, spec, [sector],
                                  estimator=estimator, options=options)
    return outcomes[sector]


def run_scenario_suite(kind: ScenarioKind, inputs: ScenarioInputs,
                       spec: ModelSpec, sectors: Sequence[str],
                       *, estimator: str = "ppml",
                       options: EstimatorOptions | None = None,
                       jobs: int = 1) -> dict[str, ScenarioOutcome]:
    """One data transformation, one re-estimation per requested sector."""
    kind = ScenarioKind(kind)
    flows, attrs, log, n_missing = transform(kind, inputs)
    totals = group_totals(flows, inputs.attrs, inputs.sector_map)

    def one(sector):
        fit = _fit_for(flows, attrs, inputs, spec, sector, estimator, options)
        return ScenarioOutcome(
            kind=kind, sector=sector, flows=tuple(flows), attrs=tuple(attrs),
            fit=fit, substitution_log=tuple(log), totals=totals,
            n_tariff_rate_missing=n_missing)

    if jobs > 1 and len(sectors) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            fitted = list(pool.map(one, sectors))
        return {s: o for s, o in zip(sectors, fitted)}
    return {s: one(s) for s in sectors}


# ---------------------------------------------------------------------------
# impact metrics

def indicator_relative_impact(beta_scenario: float, beta_soft: float) -> float:
    """Percent change in value levels implied by an indicator shift."""
    return (math.exp(beta_scenario - beta_soft) - 1.0) * 100.0


def continuous_relative_impact(beta_scenario: float, beta_soft: float) -> float:
    """Relative elasticity change, in percent of the soft elasticity."""
    if beta_soft == 0.0:
        raise ZeroBaseline("relative impact undefined for a zero base coefficient")
    return (beta_scenario - beta_soft) / beta_soft * 100.0


def worst_case_two_se(delta: float, se: float) -> float:
    """Percent impact when the coefficient shift is two SEs less favourable."""
    return (math.exp(delta - 2.0 * se) - 1.0) * 100.0


def eu28_impact(outcome_scenario: ScenarioOutcome,
                outcome_soft: ScenarioOutcome) -> dict[str, float]:
    """Percent change of EU-28 value totals against the soft scenario.

    Computed from value sums, never from coefficients; one entry per sector
    present in the totals plus the all-sector aggregate.
    """
    out = {}
    for sector, groups in outcome_soft.totals.items():
        base = groups["EU28"]
        if sector not in outcome_scenario.totals:
            continue
        new = outcome_scenario.totals[sector]["EU28"]
        if base == 0:
            if new == 0:
                continue       # sector carries no EU-28 value in either world
            raise ZeroBaseValue(sector)
        out[sector] = 100.0 * (new - base) / base
    return out


def gni_adjustment(gni_star: float, soft_total: float,
                   scenario_total: float) -> tuple[float, float]:
    """Shift a national income aggregate by the scenario's export-value change."""
    adjusted = gni_star - (soft_total - scenario_total)
    percent = 100.0 * (adjusted - gni_star) / gni_star
    return adjusted, percent


# ---------------------------------------------------------------------------
# impact report

@dataclass(frozen=True)
class GniBlock:
    gni_star: float
    soft_total: float
    scenario_total: float
    adjusted: float
    percent: float


@dataclass(frozen=True)
class ImpactRow:
    sector: str
    metric: str
    value: float


@dataclass(frozen=True)
class ImpactReport:
    kind: ScenarioKind
    rows: tuple[ImpactRow, ...]
    gni: GniBlock | None = None


_INDICATOR_METRICS = (("gb", "gb_relative_impact_pct"),
                      ("ni", "ni_relative_impact_pct"))
_CONTINUOUS_METRICS = (("log_gdp", "gdp_relative_impact_pct"),
                       ("log_distance_km", "distance_relative_impact_pct"))


def build_impact_report(scenario_by_sector: Mapping[str, ScenarioOutcome],
                        soft_by_sector: Mapping[str, ScenarioOutcome],
                        gni_params: tuple[float, float, float] | None = None,
                        ) -> ImpactReport:
    """Assemble the per-sector impact table for one scenario against Soft.

    ``gni_params`` is (gni_star, soft_total, scenario_total); totals are
    user-supplied report parameters (they may come from the outcome totals
    or from published aggregates).
    """
    sectors = [s for s in [*SECTOR_LABELS, ALL_SECTORS] if s in scenario_by_sector]
    rows: list[ImpactRow] = []
    kind = None
    value_impacts = {}
    if sectors:
        # Totals are shared across the suite's outcomes; any sector's pair works.
        value_impacts = eu28_impact(scenario_by_sector[sectors[-1]],
                                    soft_by_sector[sectors[-1]])
    for sector in sectors:
        scen = scenario_by_sector[sector]
        soft = soft_by_sector[sector]
        kind = scen.kind
        for coef, metric in _INDICATOR_METRICS:
            if coef in scen.fit.coefficients and coef in soft.fit.coefficients:
                delta_pair = (scen.fit.coefficients[coef],
                              soft.fit.coefficients[coef])
                rows.append(ImpactRow(sector, metric,
                                      indicator_relative_impact(*delta_pair)))
                if scen.fit.covariance_robust is not None:
                    delta = delta_pair[0] - delta_pair[1]
                    se = scen.fit.robust_se(coef)
                    rows.append(ImpactRow(
                        sector, metric.replace("_relative_impact_pct",
                                               "_worst_case_two_se_pct"),
                        worst_case_two_se(delta, se)))
        for coef, metric in _CONTINUOUS_METRICS:
            if coef in scen.fit.coefficients and coef in soft.fit.coefficients:
                base = soft.fit.coefficients[coef]
                if base != 0.0:
                    rows.append(ImpactRow(
                        sector, metric,
                        continuous_relative_impact(scen.fit.coefficients[coef],
                                                   base)))
        if sector in value_impacts:
            rows.append(ImpactRow(sector, "eu28_value_impact_pct",
                                  value_impacts[sector]))

    gni = None
    if gni_params is not None:
        gni_star, soft_total, scenario_total = gni_params
        adjusted, percent = gni_adjustment(gni_star, soft_total, scenario_total)
        gni = GniBlock(gni_star=gni_star, soft_total=soft_total,
                       scenario_total=scenario_total, adjusted=adjusted,
                       percent=percent)
    return ImpactReport(kind=kind if kind is not None else ScenarioKind.BASELINE,
                        rows=tuple(rows), gni=gni)


def write_impact_csv(path, report: ImpactReport) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sector", "metric", "value"])
        for row in report.rows:
            w.writerow([row.sector, row.metric, repr(float(row.value))])
        if report.gni is not None:
            g = report.gni
            w.writerow(["AllSectors", "gni_star", repr(float(g.gni_star))])
            w.writerow(["AllSectors", "gni_soft_total", repr(float(g.soft_total))])
            w.writerow(["AllSectors", "gni_scenario_total",
                        repr(float(g.scenario_total))])
            w.writerow(["AllSectors", "gni_adjusted", repr(float(g.adjusted))])
            w.writerow(["AllSectors", "gni_change_pct", repr(float(g.percent))])


def write_impact_markdown(path, report: ImpactReport) -> None:
    """Sector-by-metric grid plus the national-income block."""
    sectors = []
    for row in report.rows:
        if row.sector not in sectors:
            sectors.append(row.sector)
    metrics = []
    for row in report.rows:
        if row.metric not in metrics:
            metrics.append(row.metric)
    cell = {(r.sector, r.metric): r.value for r in report.rows}

    lines = [f"# Impact report: {report.kind.value}", ""]
    if sectors:
        lines.append("| Metric | " + " | ".join(sectors) + " |")
        lines.append("|---" * (len(sectors) + 1) + "|")
        for metric in metrics:
            vals = []
            for s in sectors:
                v = cell.get((s, metric))
                vals.append("" if v is None else f"{v:.1f}")
            lines.append(f"| {metric} | " + " | ".join(vals) + " |")
        lines.append("")
    if report.gni is not None:
        g = report.gni
        lines += [
            "## National income adjustment",
            "",
            "| | Value | Change on soft export value | Adjusted | Change (%) |",
            "|---|---|---|---|---|",
            (f"| GNI* | {g.gni_star:.1f} | {g.soft_total - g.scenario_total:.1f} "
             f"| {g.adjusted:.1f} | {g.percent:.1f} |"),
            "",
        ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def write_substitution_csv(path, log: Iterable[SubstitutionEntry]) -> None:
    import csv

    def fmt(cents):
        return f"{cents // 100}.{cents % 100:02d}"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "cn8", "old_dest", "disposition", "new_dest",
                    "old_value", "new_value"])
        for e in log:
            w.writerow([e.year, e.cn8, e.old_dest, e.disposition, e.new_dest,
                        fmt(e.old_value_cents), fmt(e.new_value_cents)])
