"""Batch command-line front end: validate | estimate | remoteness | scenario.

Exit codes are a stable contract: 0 ok, 2 input problem, 3 a fit failed to
converge (files still written), 4 numerical structure (rank/Hessian),
5 internal error. All configuration comes from files and flags; no
environment variable affects numerics.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .datamodel import ALL_SECTORS, SECTOR_LABELS
from .design import ModelSpec, build_design
from .errors import (
    GravimetricError,
    HessianNotPositiveDefinite,
    InputError,
    NumericalStructureError,
)
from .glm import (
    EstimatorOptions,
    fit_nbpml,
    fit_ols,
    fit_ppml,
    write_coefficient_csv,
)
from .ingest import (
    AggregationLevel,
    aggregate,
    count_duplicate_flow_keys,
    merge,
    read_attributes,
    read_bilateral,
    read_sector_map,
    read_tariffs,
    read_trade_flows,
)
from .remoteness import (
    exporter_remoteness_series,
    read_distances,
    read_remoteness,
    write_remoteness,
)
from .scenario import (
    ScenarioInputs,
    ScenarioKind,
    build_impact_report,
    run_scenario_suite,
    write_impact_csv,
    write_impact_markdown,
    write_substitution_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_NUMERICAL = 4
EXIT_INTERNAL = 5

_FITTERS = {"ols": fit_ols, "ppml": fit_ppml, "nbpml": fit_nbpml}


def _slug(sector: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", sector.lower()).strip("_")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(command: str, args, input_paths: dict, spec_echo=None,
              seed=None, out_dir: Path | None = None) -> dict:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_paths": {k: str(v) for k, v in input_paths.items()},
        "inputs": {k: _sha256(v) for k, v in input_paths.items()},
        "spec_echo": spec_echo,
        "seed": seed,
    }
    if out_dir is not None:
        manifest["outputs"] = sorted(p.name for p in out_dir.iterdir()
                                     if p.name != "manifest.json")
    if not getattr(args, "reproducible", False):
        manifest["created_utc"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return manifest


def _load_remoteness_series(path) -> dict[int, float]:
    indices = read_remoteness(path)
    countries = {i.country for i in indices}
    if len(countries) > 1:
        raise InputError(
            f"remoteness file {path} mixes countries {sorted(countries)}; "
            "a single exporter series is required")
    by_year = {}
    for i in indices:
        if i.year in by_year:
            raise InputError(f"duplicate remoteness year {i.year} in {path}")
        by_year[i.year] = i.r
    return by_year


def _sector_list(requested: str, sector_map) -> list[str]:
    if requested != "all":
        if requested == ALL_SECTORS:
            return [ALL_SECTORS]
        if requested not in SECTOR_LABELS:
            raise InputError(f"unknown sector '{requested}'")
        if sector_map is None:
            raise InputError("per-sector runs require --sectors")
        return [requested]
    if sector_map is None:
        return [ALL_SECTORS]
    return [*SECTOR_LABELS, ALL_SECTORS]


def cmd_validate(args) -> int:
    input_paths = {"flows": args.flows, "attrs": args.attrs}
    flows = read_trade_flows(args.flows)
    attrs = read_attributes(args.attrs)
    if args.bilateral:
        input_paths["bilateral"] = args.bilateral
        read_bilateral(args.bilateral)
    if args.tariffs:
        input_paths["tariffs"] = args.tariffs
        read_tariffs(args.tariffs)
    sector_map = None
    if args.sectors:
        input_paths["sectors"] = args.sectors
        sector_map = read_sector_map(args.sectors)
    if args.distances:
        input_paths["distances"] = args.distances
        read_distances(args.distances)

    cells = aggregate(flows, AggregationLevel.COUNTRY)
    _, report = merge(cells, attrs, n_flows_read=len(flows),
                      duplicate_keys=count_duplicate_flow_keys(flows))
    if sector_map is not None:
        # Forces a sector resolution for every code in the dataset.
        aggregate(flows, AggregationLevel.SECTOR, sector_map)

    for name in ("n_flows_read", "n_attrs_read", "n_matched",
                 "n_dropped_no_attrs", "n_clamped", "duplicate_keys"):
        print(f"{name}={getattr(report, name)}")
    return EXIT_OK


def _fit_one_sector(sector, flows, attrs, remoteness, sector_map, spec,
                    estimator, options):
    """Returns (fit, numerical_error_name or None)."""
    if sector == ALL_SECTORS:
        cells = aggregate(flows, AggregationLevel.COUNTRY)
    else:
        cells = [c for c in aggregate(flows, AggregationLevel.SECTOR, sector_map)
                 if c.sector == sector]
    observations, _ = merge(cells, attrs, remoteness)
    dm = build_design(observations, spec)
    fitter = _FITTERS[estimator]
    try:
        fit = fitter(dm) if estimator == "ols" else fitter(dm, options)
    except HessianNotPositiveDefinite as exc:
        return exc.fit, type(exc).__name__
    return fit, None


def _write_fit_files(out_dir: Path, stem: str, sector: str, fit, spec,
                     error_name=None) -> None:
    write_coefficient_csv(out_dir / f"coefficients_{stem}.csv", fit)
    doc = fit.to_json_dict()
    doc.update({
        "sector": sector,
        "spec_echo": spec.to_dict(),
        "numerical_error": error_name,
        "manifest": "manifest.json",
    })
    _write_json(out_dir / f"fit_{stem}.json", doc)


def cmd_estimate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = ModelSpec.from_file(args.spec)
    input_paths = {"spec": args.spec, "flows": args.flows, "attrs": args.attrs}

    flows = read_trade_flows(args.flows)
    attrs = read_attributes(args.attrs)
    sector_map = None
    if args.sectors:
        input_paths["sectors"] = args.sectors
        sector_map = read_sector_map(args.sectors)
    remoteness = None
    if args.remoteness:
        input_paths["remoteness"] = args.remoteness
        remoteness = _load_remoteness_series(args.remoteness)
    if spec.remoteness_terms and remoteness is None:
        raise InputError("model spec uses remoteness terms; pass --remoteness")

    sectors = _sector_list(args.sector, sector_map)
    options = EstimatorOptions()

    def work(sector):
        return _fit_one_sector(sector, flows, attrs, remoteness, sector_map,
                               spec, args.estimator, options)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, sectors))

    status = EXIT_OK
    for sector, (fit, error_name) in zip(sectors, results):
        stem = _slug(sector)
        _write_fit_files(out_dir, stem, sector, fit, spec, error_name)
        line = (f"sector={sector} estimator={fit.estimator} "
                f"converged={str(fit.converged).lower()}")
        if error_name:
            line += f" error={error_name}"
            status = EXIT_NUMERICAL
        elif not fit.converged and status != EXIT_NUMERICAL:
            status = EXIT_CONVERGENCE
        print(line)

    _write_json(out_dir / "manifest.json",
                _manifest("estimate", args, input_paths, spec.to_dict(),
                          out_dir=out_dir))
    return status


def cmd_remoteness(args) -> int:
    bilateral = read_bilateral(args.bilateral)
    distances = read_distances(args.distances)
    years = sorted({r.year for r in bilateral})
    series = exporter_remoteness_series(args.exporter, years, bilateral, distances)
    write_remoteness(args.out, series)
    print(f"wrote {len(series)} remoteness indices to {args.out}")
    return EXIT_OK


def cmd_scenario(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = ModelSpec.from_file(args.spec)
    kind = ScenarioKind(args.kind)
    input_paths = {"spec": args.spec, "flows": args.flows, "attrs": args.attrs}

    flows = read_trade_flows(args.flows)
    attrs = read_attributes(args.attrs)
    tariffs = ()
    if args.tariffs:
        input_paths["tariffs"] = args.tariffs
        tariffs = tuple(read_tariffs(args.tariffs))
    elif kind in (ScenarioKind.REGULATORY_ALIGNMENT, ScenarioKind.HARD,
                  ScenarioKind.LONG_TERM_HARD):
        raise InputError(f"scenario '{kind.value}' requires --tariffs")
    sector_map = None
    if args.sectors:
        input_paths["sectors"] = args.sectors
        sector_map = read_sector_map(args.sectors)
    remoteness = None
    if args.remoteness:
        input_paths["remoteness"] = args.remoteness
        remoteness = _load_remoteness_series(args.remoteness)
    if spec.remoteness_terms and remoteness is None:
        raise InputError("model spec uses remoteness terms; pass --remoteness")

    inputs = ScenarioInputs(flows=tuple(flows), attrs=tuple(attrs),
                            tariffs=tariffs, sector_map=sector_map,
                            remoteness=remoteness)
    sectors = _sector_list("all", sector_map)
    options = EstimatorOptions()
    jobs = max(1, args.jobs)

    baseline = run_scenario_suite(ScenarioKind.BASELINE, inputs, spec, sectors,
                                  estimator=args.estimator, options=options,
                                  jobs=jobs)
    soft = run_scenario_suite(ScenarioKind.SOFT, inputs, spec, sectors,
                              estimator=args.estimator, options=options,
                              jobs=jobs)
    if kind is ScenarioKind.SOFT:
        scenario = soft
    else:
        scenario = run_scenario_suite(kind, inputs, spec, sectors,
                                      estimator=args.estimator, options=options,
                                      jobs=jobs)

    status = EXIT_OK
    for sector in sectors:
        stem = _slug(sector)
        _write_fit_files(out_dir, stem, sector, scenario[sector].fit, spec)
        _write_fit_files(out_dir, f"baseline_{stem}", sector,
                         baseline[sector].fit, spec)
        if kind is not ScenarioKind.SOFT:
            _write_fit_files(out_dir, f"soft_{stem}", sector, soft[sector].fit,
                             spec)
        for fit in (scenario[sector].fit, baseline[sector].fit,
                    soft[sector].fit):
            if not fit.converged:
                status = EXIT_CONVERGENCE
        print(f"sector={sector} kind={kind.value} "
              f"converged={str(scenario[sector].fit.converged).lower()}")

    gni_params = None
    if args.gni is not None:
        soft_total = args.soft_total
        scenario_total = args.scenario_total
        if soft_total is None:
            soft_total = soft[sectors[-1]].totals[ALL_SECTORS]["World"] / 100.0
        if scenario_total is None:
            scenario_total = scenario[sectors[-1]].totals[ALL_SECTORS]["World"] / 100.0
        gni_params = (args.gni, soft_total, scenario_total)

    report = build_impact_report(scenario, soft, gni_params)
    write_impact_csv(out_dir / "impact.csv", report)
    write_impact_markdown(out_dir / "impact.md", report)
    if kind is ScenarioKind.LONG_TERM_HARD:
        write_substitution_csv(out_dir / "substitution.csv",
                               scenario[sectors[-1]].substitution_log)
    if report.gni is not None:
        print(f"gni: adjusted={report.gni.adjusted:.1f} "
              f"change={report.gni.percent:.1f}%")

    _write_json(out_dir / "manifest.json",
                _manifest("scenario", args, input_paths, spec.to_dict(),
                          out_dir=out_dir))
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gravimetric",
        description="Gravity-model trade-flow estimation and counterfactual "
                    "scenario toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="read, validate and merge the inputs")
    p.add_argument("--flows", required=True)
    p.add_argument("--attrs", required=True)
    p.add_argument("--bilateral")
    p.add_argument("--tariffs")
    p.add_argument("--sectors")
    p.add_argument("--distances")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("estimate", help="fit gravity models per sector")
    p.add_argument("--estimator", choices=("ols", "ppml", "nbpml"),
                   required=True)
    p.add_argument("--spec", required=True, help="model spec (JSON or TOML)")
    p.add_argument("--sector", default="all",
                   help="a sector label, 'AllSectors', or 'all'")
    p.add_argument("--flows", required=True)
    p.add_argument("--attrs", required=True)
    p.add_argument("--sectors", help="sector map CSV")
    p.add_argument("--remoteness", help="exporter remoteness series CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--reproducible", action="store_true",
                   help="omit timestamps so reruns are byte-identical")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("remoteness", help="compute exporter remoteness indices")
    p.add_argument("--bilateral", required=True)
    p.add_argument("--distances", required=True)
    p.add_argument("--exporter", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_remoteness)

    p = sub.add_parser("scenario", help="run a counterfactual scenario")
    p.add_argument("--kind", choices=tuple(k.value for k in ScenarioKind
                                           if k is not ScenarioKind.BASELINE),
                   required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--estimator", choices=("ols", "ppml", "nbpml"),
                   default="ppml")
    p.add_argument("--flows", required=True)
    p.add_argument("--attrs", required=True)
    p.add_argument("--tariffs")
    p.add_argument("--sectors", help="sector map CSV")
    p.add_argument("--remoteness", help="exporter remoteness series CSV")
    p.add_argument("--gni", type=float,
                   help="national income aggregate for the adjustment block")
    p.add_argument("--soft-total", type=float, dest="soft_total",
                   help="override the soft-scenario export total")
    p.add_argument("--scenario-total", type=float, dest="scenario_total",
                   help="override the scenario export total")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--reproducible", action="store_true")
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except InputError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalStructureError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GravimetricError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:   # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
