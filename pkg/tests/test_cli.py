import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from gravimetric import cli, ingest
from gravimetric.datamodel import CountryYearAttributes, IndicatorFlags, TradeFlowRecord
from gravimetric.remoteness import read_remoteness
from gravimetric.synth import SynthConfig, write_bundle

SPEC_JSON = ('{"response_scale": "natural", "continuous": ["gdp", "distance_km"], '
             '"indicators": ["gb", "ni", "eu"]}')


def bundle_config(**kw):
    base = dict(
        n_countries=20, years=(2014, 2016), seed=99,
        beta_true={"intercept": -4.0, "log_gdp": 0.55, "log_distance_km": -0.6,
                   "gb": 0.4, "ni": -0.5, "eu": 0.3},
        family="poisson", n_goods=16)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    paths = write_bundle(root, bundle_config())
    spec = root / "spec.json"
    spec.write_text(SPEC_JSON)
    paths["spec"] = spec
    return paths


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_coef_csv(path):
    with open(path, newline="") as fh:
        return {row["name"]: row for row in csv.DictReader(fh)}


class TestValidate:
    def test_valid_bundle(self, bundle, capsys):
        code = run("validate", "--flows", bundle["flows"], "--attrs",
                   bundle["attrs"], "--tariffs", bundle["tariffs"],
                   "--sectors", bundle["sectors"], "--bilateral",
                   bundle["bilateral"], "--distances", bundle["distances"])
        assert code == 0
        out = capsys.readouterr().out
        assert "n_matched=60" in out
        assert "n_dropped_no_attrs=0" in out

    def test_malformed_flows_names_position(self, bundle, tmp_path, capsys):
        bad = tmp_path / "flows.csv"
        bad.write_text("year,destination,cn8,value_eur,volume\n"
                       "2016,FR,01012100,xyz,\n")
        code = run("validate", "--flows", bad, "--attrs", bundle["attrs"])
        assert code == 2
        err = capsys.readouterr().err
        assert "row 2" in err and "value_eur" in err

    def test_missing_file(self, bundle, tmp_path, capsys):
        missing = tmp_path / "nope.csv"
        code = run("validate", "--flows", missing, "--attrs", bundle["attrs"])
        assert code == 2
        assert "nope.csv" in capsys.readouterr().err


class TestEstimate:
    def test_ppml_all_sectors(self, bundle, tmp_path, capsys):
        out = tmp_path / "est"
        code = run("estimate", "--estimator", "ppml", "--spec", bundle["spec"],
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--sectors", bundle["sectors"], "--out", out,
                   "--reproducible")
        assert code == 0
        written = sorted(p.name for p in out.iterdir())
        assert "coefficients_allsectors.csv" in written
        assert "fit_allsectors.json" in written
        assert "manifest.json" in written
        assert len([n for n in written if n.startswith("coefficients_")]) == 9
        doc = json.loads((out / "fit_allsectors.json").read_text())
        assert doc["converged"] is True
        assert doc["estimator"] == "PPML"
        assert doc["spec_echo"]["indicators"] == ["gb", "ni", "eu"]
        assert doc["manifest"] == "manifest.json"
        manifest = json.loads((out / "manifest.json").read_text())
        assert "fit_allsectors.json" in manifest["outputs"]
        assert "created_utc" not in manifest        # --reproducible
        assert set(manifest["inputs"]) == {"spec", "flows", "attrs", "sectors"}

    def test_single_sector_run(self, bundle, tmp_path):
        out = tmp_path / "est"
        code = run("estimate", "--estimator", "ppml", "--spec", bundle["spec"],
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--sectors", bundle["sectors"], "--sector", "Textiles",
                   "--out", out)
        assert code == 0
        assert (out / "coefficients_textiles.csv").exists()
        assert not (out / "coefficients_allsectors.csv").exists()

    def test_nbpml_rank_marginal_exits_4(self, tmp_path, capsys):
        # area tracks gdp to 1e-6, passing the rank check but defeating the
        # Hessian factorization
        rng = np.random.Generator(np.random.Philox(8))
        attrs, flows = [], []
        codes = [f"{chr(65 + i // 26)}{chr(65 + i % 26)}" for i in range(16)]
        for i, iso in enumerate(codes):
            for year in (2000, 2001):
                gdp = float(np.exp(rng.uniform(21, 27)))
                area = gdp * (1.0 + 1e-6 * float(rng.uniform(0.5, 1.0)))
                attrs.append(CountryYearAttributes(
                    iso=iso, year=year, gdp=gdp, population=1e6,
                    area_km2=area, distance_km=500.0 + 13 * i,
                    religion_share=0.5, flags=IndicatorFlags()))
                mu = math.exp(-9 + 0.5 * math.log(gdp))
                flows.append(TradeFlowRecord(year, iso, "01000000",
                                             int(rng.poisson(mu)) * 100))
        ingest.write_attributes(tmp_path / "attrs.csv", attrs)
        ingest.write_trade_flows(tmp_path / "flows.csv", flows)
        spec = tmp_path / "spec.json"
        spec.write_text('{"response_scale": "natural", '
                        '"continuous": ["gdp", "area_km2"]}')
        out = tmp_path / "est"
        code = run("estimate", "--estimator", "nbpml", "--spec", spec,
                   "--flows", tmp_path / "flows.csv",
                   "--attrs", tmp_path / "attrs.csv", "--out", out)
        assert code == 4
        assert "HessianNotPositiveDefinite" in capsys.readouterr().out
        # coefficient table still written, covariance columns empty
        table = read_coef_csv(out / "coefficients_allsectors.csv")
        assert table["log_gdp"]["robust_se"] == ""

    def test_ols_all_zero_flows_exits_2(self, bundle, tmp_path, capsys):
        flows = [TradeFlowRecord(2014, "GB", "01000000", 0),
                 TradeFlowRecord(2014, "NI", "01000000", 0)]
        ingest.write_trade_flows(tmp_path / "flows.csv", flows)
        spec = tmp_path / "spec.json"
        spec.write_text('{"response_scale": "log", "continuous": ["gdp"]}')
        code = run("estimate", "--estimator", "ols", "--spec", spec,
                   "--flows", tmp_path / "flows.csv",
                   "--attrs", bundle["attrs"], "--out", tmp_path / "est")
        assert code == 2
        assert "AllZeroResponse" in capsys.readouterr().err

    def test_toml_spec(self, bundle, tmp_path):
        spec = tmp_path / "spec.toml"
        spec.write_text('response_scale = "natural"\n'
                        'continuous = ["gdp", "distance_km"]\n'
                        'indicators = ["gb", "ni", "eu"]\n')
        code = run("estimate", "--estimator", "ppml", "--spec", spec,
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--out", tmp_path / "est")
        assert code == 0

    def test_remoteness_spec_requires_series(self, bundle, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text('{"response_scale": "natural", "intercept": false, '
                        '"continuous": ["gdp"], "remoteness_terms": true}')
        code = run("estimate", "--estimator", "ppml", "--spec", spec,
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--out", tmp_path / "est")
        assert code == 2
        assert "remoteness" in capsys.readouterr().err

    def test_estimate_with_remoteness_series(self, bundle, tmp_path):
        r = tmp_path / "remoteness.csv"
        code = run("remoteness", "--bilateral", bundle["bilateral"],
                   "--distances", bundle["distances"], "--exporter", "IE",
                   "--out", r)
        assert code == 0
        spec = tmp_path / "spec.json"
        spec.write_text('{"response_scale": "natural", "intercept": false, '
                        '"continuous": ["gdp", "distance_km"], '
                        '"remoteness_terms": true}')
        code = run("estimate", "--estimator", "ppml", "--spec", spec,
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--remoteness", r, "--out", tmp_path / "est")
        assert code == 0


class TestRemoteness:
    def test_writes_series(self, bundle, tmp_path, capsys):
        out = tmp_path / "r.csv"
        code = run("remoteness", "--bilateral", bundle["bilateral"],
                   "--distances", bundle["distances"], "--exporter", "IE",
                   "--out", out)
        assert code == 0
        series = read_remoteness(out)
        assert len(series) == 3
        assert all(i.country == "IE" and i.r > 0 for i in series)

    def test_missing_distance_exits_2(self, bundle, tmp_path, capsys):
        d = tmp_path / "d.csv"
        d.write_text("country_a,country_b,distance_km\nIE,GB,500\n")
        code = run("remoteness", "--bilateral", bundle["bilateral"],
                   "--distances", d, "--exporter", "IE", "--out",
                   tmp_path / "r.csv")
        assert code == 2
        assert "MissingDistance" in capsys.readouterr().err


class TestScenario:
    def scenario_args(self, bundle, out, kind, *extra):
        return ["scenario", "--kind", kind, "--spec", bundle["spec"],
                "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                "--tariffs", bundle["tariffs"], "--sectors", bundle["sectors"],
                "--out", out, "--reproducible", *extra]

    def test_soft_coefficient_shift_equals_eu(self, bundle, tmp_path):
        out = tmp_path / "soft"
        assert run(*self.scenario_args(bundle, out, "soft")) == 0
        base = read_coef_csv(out / "coefficients_baseline_allsectors.csv")
        soft = read_coef_csv(out / "coefficients_allsectors.csv")
        shift = float(soft["gb"]["estimate"]) - float(base["gb"]["estimate"])
        assert shift == pytest.approx(float(base["eu"]["estimate"]), abs=1e-6)
        # value metrics of the impact report are all zero
        with open(out / "impact.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                if row["metric"] == "eu28_value_impact_pct":
                    assert abs(float(row["value"])) < 1e-12

    def test_hard_with_zero_tariffs_zero_impacts(self, bundle, tmp_path):
        zero = tmp_path / "tariffs.csv"
        lines = Path(bundle["tariffs"]).read_text().splitlines()
        zero.write_text("\n".join(
            [lines[0]] + [f"{l.split(',')[0]},0.0" for l in lines[1:]]) + "\n")
        out = tmp_path / "hard0"
        code = run("scenario", "--kind", "hard", "--spec", bundle["spec"],
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--tariffs", zero, "--sectors", bundle["sectors"],
                   "--out", out, "--reproducible")
        assert code == 0
        with open(out / "impact.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                # worst-case rows shift by two SEs even at a zero delta
                if "worst_case" in row["metric"]:
                    continue
                assert abs(float(row["value"])) < 1e-8

    def test_gni_block_printed(self, bundle, tmp_path, capsys):
        out = tmp_path / "hard"
        code = run(*self.scenario_args(bundle, out, "hard",
                                       "--gni", "181.0", "--soft-total",
                                       "115.5", "--scenario-total", "114.7"))
        assert code == 0
        stdout = capsys.readouterr().out
        assert "adjusted=180.2" in stdout
        assert "change=-0.4%" in stdout

    def test_longterm_writes_substitution_log(self, bundle, tmp_path):
        # full substitution empties the GB/NI cells in this bundle, so the
        # re-estimation spec cannot carry gb/ni indicators
        spec = tmp_path / "spec.json"
        spec.write_text('{"response_scale": "natural", '
                        '"continuous": ["gdp", "distance_km"], '
                        '"indicators": ["eu"]}')
        out = tmp_path / "lt"
        code = run("scenario", "--kind", "longterm", "--spec", spec,
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--tariffs", bundle["tariffs"], "--sectors",
                   bundle["sectors"], "--out", out, "--reproducible")
        assert code == 0
        sub = out / "substitution.csv"
        assert sub.exists()
        with open(sub, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n_flows = len(Path(bundle["flows"]).read_text().splitlines()) - 1
        assert len(rows) == n_flows
        assert {r["disposition"] for r in rows} <= {
            "kept", "tariffed", "reassigned", "reassigned_no_unit_value"}

    def test_requires_tariffs_for_hard(self, bundle, tmp_path, capsys):
        code = run("scenario", "--kind", "hard", "--spec", bundle["spec"],
                   "--flows", bundle["flows"], "--attrs", bundle["attrs"],
                   "--out", tmp_path / "x")
        assert code == 2
        assert "--tariffs" in capsys.readouterr().err


class TestDeterminism:
    def test_estimate_rerun_byte_identical(self, bundle, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run("estimate", "--estimator", "ppml", "--spec",
                       bundle["spec"], "--flows", bundle["flows"], "--attrs",
                       bundle["attrs"], "--sectors", bundle["sectors"],
                       "--out", out, "--reproducible", "--jobs", "4") == 0
            outs.append(out)
        files_a = sorted(p.name for p in outs[0].iterdir())
        files_b = sorted(p.name for p in outs[1].iterdir())
        assert files_a == files_b
        for name in files_a:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
