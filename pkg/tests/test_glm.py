import math

import numpy as np
import pytest

from gravimetric.datamodel import GravityObservation
from gravimetric.design import ModelSpec, build_design
from gravimetric.errors import (
    AllZeroResponse,
    DegenerateSpread,
    HessianNotPositiveDefinite,
    InsufficientData,
    ZeroCoefficient,
)
from gravimetric.glm import (
    EstimatorOptions,
    _sandwich,
    cluster_robust_cov,
    cv_of,
    fit_nbpml,
    fit_ols,
    fit_ppml,
    mean_variance_diagnostic,
    percent_effect,
    pseudo_r2,
)
from gravimetric.ingest import AggregationLevel, aggregate, merge
from gravimetric.synth import (
    SynthConfig,
    generate_attributes,
    generate_flows,
    oracle_mle_grid,
    oracle_sandwich,
)

from conftest import make_design
from test_datamodel import attrs_row

STRICT = EstimatorOptions(max_iterations=200, deviance_rel_tol=1e-13,
                          coef_rel_tol=1e-12)


def poisson_design(seed, n, slope=0.8, intercept=1.0, n_clusters=10):
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.uniform(0.0, 2.0, n)
    mu = np.exp(intercept + slope * x)
    y = rng.poisson(mu).astype(float)
    X = np.column_stack([np.ones(n), x])
    return make_design(y, X, ("intercept", "x"),
                       clusters=tuple(f"C{i % n_clusters}" for i in range(n)))


def lognormal_dataset(seed=42, n_countries=100, years=(2000, 2004)):
    cfg = SynthConfig(
        n_countries=n_countries, years=years, seed=seed,
        beta_true={"intercept": -8.0, "log_gdp": 1.1, "log_distance_km": -1.0},
        family="lognormal", sigma=0.8)
    attrs = generate_attributes(cfg)
    flows = generate_flows(attrs, cfg)
    obs, _ = merge(aggregate(flows, AggregationLevel.COUNTRY), attrs)
    return obs, cfg


class TestOLS:
    def test_perfect_fit(self):
        X = np.column_stack([np.ones(6), np.arange(6.0)])
        b = np.array([2.0, -0.5])
        dm = make_design(X @ b, X, ("intercept", "x"), scale="log",
                         clusters=("A", "A", "B", "B", "C", "C"))
        fit = fit_ols(dm)
        assert fit.coefficients["intercept"] == pytest.approx(2.0, abs=1e-10)
        assert fit.coefficients["x"] == pytest.approx(-0.5, abs=1e-10)
        assert fit.pseudo_r2 == pytest.approx(1.0, abs=1e-12)

    def test_intercept_only_is_mean(self):
        y = np.array([1.0, 2.0, 6.0])
        dm = make_design(y, np.ones((3, 1)), ("intercept",), scale="log")
        fit = fit_ols(dm)
        assert fit.coefficients["intercept"] == pytest.approx(3.0)

    def test_synthetic_recovery_and_oracle(self):
        obs, cfg = lognormal_dataset()
        spec = ModelSpec(response_scale="log",
                         continuous=("gdp", "distance_km"))
        dm = build_design(obs, spec)
        assert dm.n_obs == 500
        fit = fit_ols(dm)

        # independent closed-form solve of the normal equations
        beta_oracle = np.linalg.solve(dm.X.T @ dm.X, dm.X.T @ dm.y)
        beta_hat = np.array(list(fit.coefficients.values()))
        assert np.max(np.abs(beta_hat - beta_oracle)) < 1e-8

        truth = np.array([cfg.beta_true["intercept"], cfg.beta_true["log_gdp"],
                          cfg.beta_true["log_distance_km"]])
        se = np.sqrt(np.diag(fit.covariance_robust))
        assert np.all(np.abs(beta_hat - truth) < 3 * se)

    def test_residual_orthogonality(self):
        obs, _ = lognormal_dataset(seed=7, n_countries=40, years=(2000, 2001))
        dm = build_design(obs, ModelSpec(response_scale="log",
                                         continuous=("gdp", "distance_km")))
        fit = fit_ols(dm)
        resid = dm.y - dm.X @ np.array(list(fit.coefficients.values()))
        rel = np.max(np.abs(dm.X.T @ resid)) / (1.0 + np.abs(dm.y).sum())
        assert rel < 1e-8

    def test_requires_log_design(self):
        dm = make_design([1.0, 2.0], np.ones((2, 1)), ("intercept",))
        with pytest.raises(Exception):
            fit_ols(dm)

    def test_scale_equivariance_on_logs(self):
        # scaling the raw response by c shifts log y by log c: only the
        # intercept moves
        rng = np.random.Generator(np.random.Philox(61))
        n = 40
        X = np.column_stack([np.ones(n), rng.uniform(0, 2, n)])
        logy = X @ np.array([1.0, 0.7]) + rng.normal(0, 0.4, n)
        cl = tuple(f"C{i % 5}" for i in range(n))
        f1 = fit_ols(make_design(logy, X, ("intercept", "x"), scale="log",
                                 clusters=cl))
        f2 = fit_ols(make_design(logy + math.log(250.0), X, ("intercept", "x"),
                                 scale="log", clusters=cl))
        assert f2.coefficients["x"] == pytest.approx(f1.coefficients["x"], abs=1e-8)
        shift = f2.coefficients["intercept"] - f1.coefficients["intercept"]
        assert shift == pytest.approx(math.log(250.0), abs=1e-8)


class TestPPML:
    def test_intercept_only_log_mean(self):
        dm = make_design([1.0, 2.0, 3.0], np.ones((3, 1)), ("intercept",))
        fit = fit_ppml(dm)
        assert fit.coefficients["intercept"] == pytest.approx(math.log(2.0), abs=1e-10)

    def test_two_group_closed_form(self):
        y = [1.0, 3.0, 5.0, 7.0]
        X = np.column_stack([np.ones(4), [0.0, 0.0, 1.0, 1.0]])
        fit = fit_ppml(make_design(y, X, ("intercept", "d")), STRICT)
        assert fit.coefficients["intercept"] == pytest.approx(math.log(2.0), abs=1e-8)
        assert fit.coefficients["d"] == pytest.approx(math.log(3.0), abs=1e-8)

    def test_grid_oracle_agreement(self):
        dm = poisson_design(seed=7, n=50)
        fit = fit_ppml(dm, STRICT)
        grid = oracle_mle_grid(dm, (-3.0, 3.0), 0.25)
        beta = np.array(list(fit.coefficients.values()))
        assert np.max(np.abs(beta - grid)) <= 1e-3

    def test_score_identity_and_total(self):
        dm = poisson_design(seed=19, n=120)
        fit = fit_ppml(dm)
        mu = np.exp(dm.X @ np.array(list(fit.coefficients.values())))
        assert np.max(np.abs(dm.X.T @ (dm.y - mu))) <= 1e-6 * dm.y.sum()
        assert abs(mu.sum() - dm.y.sum()) <= 1e-6 * dm.y.sum()

    def test_scale_equivariance(self):
        dm = poisson_design(seed=23, n=80)
        fit1 = fit_ppml(dm, STRICT)
        dm2 = make_design(dm.y * 250.0, dm.X, dm.columns, clusters=dm.clusters)
        fit2 = fit_ppml(dm2, STRICT)
        assert fit2.coefficients["x"] == pytest.approx(fit1.coefficients["x"], abs=1e-8)
        shift = fit2.coefficients["intercept"] - fit1.coefficients["intercept"]
        assert shift == pytest.approx(math.log(250.0), abs=1e-8)
        assert fit2.pseudo_r2 == pytest.approx(fit1.pseudo_r2, abs=1e-9)

    def test_pseudo_r2_range(self):
        fit = fit_ppml(poisson_design(seed=29, n=60))
        assert -1e-9 <= fit.pseudo_r2 <= 1.0 + 1e-12
        assert pseudo_r2(fit) == pytest.approx(fit.pseudo_r2)

    def test_all_zero_response(self):
        dm = make_design([0.0, 0.0], np.ones((2, 1)), ("intercept",))
        with pytest.raises(AllZeroResponse):
            fit_ppml(dm)

    def test_unconverged_flag_still_returns(self):
        dm = poisson_design(seed=31, n=100)
        fit = fit_ppml(dm, EstimatorOptions(max_iterations=1,
                                            deviance_rel_tol=1e-15,
                                            coef_rel_tol=1e-15))
        assert not fit.converged
        assert fit.iterations == 1
        assert all(np.isfinite(v) for v in fit.coefficients.values())

    def test_reparametrization_identity(self):
        # replacing eu by (eu - gb - ni) leaves the fit invariant up to the
        # documented coefficient shifts
        rng = np.random.Generator(np.random.Philox(37))
        n = 90
        gb = np.zeros(n); gb[:6] = 1.0
        ni = np.zeros(n); ni[6:12] = 1.0
        eu = np.zeros(n); eu[:40] = 1.0          # gb/ni rows are eu members
        x = rng.uniform(0.0, 2.0, n)
        mu = np.exp(1.0 + 0.5 * x + 0.4 * gb - 0.3 * ni + 0.2 * eu)
        y = rng.poisson(mu).astype(float)
        X1 = np.column_stack([np.ones(n), x, gb, ni, eu])
        X2 = np.column_stack([np.ones(n), x, gb, ni, eu - gb - ni])
        cl = tuple(f"C{i % 15}" for i in range(n))
        cols = ("intercept", "x", "gb", "ni", "eu")
        f1 = fit_ppml(make_design(y, X1, cols, clusters=cl), STRICT)
        f2 = fit_ppml(make_design(y, X2, cols, clusters=cl), STRICT)
        b1, b2 = f1.coefficients, f2.coefficients
        assert b2["gb"] == pytest.approx(b1["gb"] + b1["eu"], abs=1e-6)
        assert b2["ni"] == pytest.approx(b1["ni"] + b1["eu"], abs=1e-6)
        for name in ("intercept", "x", "eu"):
            assert b2[name] == pytest.approx(b1[name], abs=1e-6)
        mu1 = np.exp(X1 @ np.array(list(b1.values())))
        mu2 = np.exp(X2 @ np.array(list(b2.values())))
        assert np.max(np.abs(mu1 - mu2) / (1.0 + mu1)) < 1e-6
        assert f2.loglik == pytest.approx(f1.loglik, rel=1e-10)


class TestNBPML:
    def test_poisson_data_small_alpha(self):
        dm = poisson_design(seed=11, n=500)
        nb = fit_nbpml(dm)
        pp = fit_ppml(dm)
        assert nb.dispersion < 0.05
        se = np.sqrt(np.diag(pp.covariance_robust))
        diff = np.abs(np.array(list(nb.coefficients.values()))
                      - np.array(list(pp.coefficients.values())))
        assert np.all(diff <= 3 * se)

    def test_intercept_only_mean_preserved(self):
        dm = make_design([1.0, 2.0, 3.0], np.ones((3, 1)), ("intercept",))
        fit = fit_nbpml(dm, STRICT)
        assert math.exp(fit.coefficients["intercept"]) == pytest.approx(2.0, abs=1e-8)

    def test_overdispersed_alpha_recovery(self):
        rng = np.random.Generator(np.random.Philox(13))
        n = 1000
        x = rng.uniform(0.0, 2.0, n)
        mu = np.exp(2.0 + 0.7 * x)
        alpha = 1.4
        shape = 1.0 / alpha
        y = rng.negative_binomial(shape, shape / (shape + mu)).astype(float)
        dm = make_design(y, np.column_stack([np.ones(n), x]), ("intercept", "x"),
                         clusters=tuple(f"C{i % 25}" for i in range(n)))
        fit = fit_nbpml(dm)
        assert 1.0 <= fit.dispersion <= 1.8
        assert fit.converged

    def test_hessian_not_positive_definite(self):
        rng = np.random.Generator(np.random.Philox(3))
        n = 60
        x1 = rng.uniform(1.0, 2.0, n)
        x2 = x1 * (1.0 + 1e-9 * rng.uniform(0.5, 1.0, n))
        mu = np.exp(0.5 + 1.2 * x1)
        y = rng.poisson(mu).astype(float)
        X = np.column_stack([np.ones(n), x1, x2])
        dm = make_design(y, X, ("intercept", "x1", "x2"),
                         clusters=tuple(f"C{i % 10}" for i in range(n)))
        with pytest.raises(HessianNotPositiveDefinite) as err:
            fit_nbpml(dm)
        bare = err.value.fit
        assert all(np.isfinite(v) for v in bare.coefficients.values())
        assert bare.covariance_model is None
        assert bare.covariance_robust is None


class TestClusterRobust:
    def test_singleton_clusters_collapse_to_hc0(self):
        dm = poisson_design(seed=41, n=50, n_clusters=50)
        fit = fit_ppml(dm, STRICT)
        cov = cluster_robust_cov(fit, dm)
        beta = np.array(list(fit.coefficients.values()))
        mu = np.exp(dm.X @ beta)
        bread = np.linalg.inv(dm.X.T @ (dm.X * mu[:, None]))
        scores = dm.X * (dm.y - mu)[:, None]
        hc0 = bread @ (scores.T @ scores) @ bread
        n = dm.n_obs
        assert np.allclose(cov, hc0 * n / (n - 1), rtol=1e-10)

    def test_duplicated_row_equals_weighted_row(self):
        # score additivity: k copies of a row in one cluster act exactly
        # like a single row carrying weight k
        x = np.array([1.0, 0.7])
        mu_x, y_x = 2.5, 4.0
        other_X = np.array([[1.0, 0.2], [1.0, 1.9]])
        other_mu = np.array([1.5, 3.5])
        other_y = np.array([2.0, 3.0])
        k = 3

        X_a = np.vstack([np.tile(x, (k, 1)), other_X])
        w_a = np.array([mu_x] * k + list(other_mu))
        sr_a = np.array([y_x - mu_x] * k + list(other_y - other_mu))
        cl_a = ("g",) * k + ("h", "i")

        X_b = np.vstack([x, other_X])
        w_b = np.array([k * mu_x] + list(other_mu))
        sr_b = np.array([k * (y_x - mu_x)] + list(other_y - other_mu))
        cl_b = ("g", "h", "i")

        cov_a, _, _ = _sandwich(X_a, w_a, sr_a, cl_a)
        cov_b, _, _ = _sandwich(X_b, w_b, sr_b, cl_b)
        assert np.allclose(cov_a, cov_b, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("seed", [41, 43, 47])
    def test_three_cluster_oracle_agreement(self, seed):
        dm = poisson_design(seed=seed, n=30, n_clusters=3)
        fit = fit_ppml(dm, STRICT)
        cov = cluster_robust_cov(fit, dm)
        ora = oracle_sandwich(dm, fit.coefficients, family="poisson")
        assert np.max(np.abs(cov - ora)) <= 1e-10 * (1.0 + np.abs(ora).max())

    def test_ols_oracle_agreement(self):
        rng = np.random.Generator(np.random.Philox(53))
        n = 40
        X = np.column_stack([np.ones(n), rng.uniform(0, 1, n)])
        y = X @ np.array([1.0, 2.0]) + rng.normal(0, 0.3, n)
        dm = make_design(y, X, ("intercept", "x"), scale="log",
                         clusters=tuple(f"C{i % 5}" for i in range(n)))
        fit = fit_ols(dm)
        cov = cluster_robust_cov(fit, dm)
        ora = oracle_sandwich(dm, fit.coefficients, family="ols")
        assert np.max(np.abs(cov - ora)) <= 1e-10 * (1.0 + np.abs(ora).max())

    def test_symmetric_psd(self):
        dm = poisson_design(seed=59, n=70, n_clusters=7)
        fit = fit_ppml(dm)
        cov = cluster_robust_cov(fit, dm)
        assert np.allclose(cov, cov.T)
        assert np.min(np.linalg.eigvalsh(cov)) >= -1e-12


class TestSmallFormulas:
    def test_percent_effect_zero(self):
        assert percent_effect(0.0) == 0.0

    def test_percent_effect_monotone(self):
        assert percent_effect(0.5) > 0 > percent_effect(-0.5)

    def test_cv_of_definition(self):
        assert cv_of(2.0, 0.2) == pytest.approx(0.1)
        assert cv_of(-2.0, 0.2) == pytest.approx(0.1)

    def test_cv_of_exact_estimate(self):
        assert cv_of(1.0, 0.0) == 0.0

    def test_cv_of_zero_coefficient(self):
        with pytest.raises(ZeroCoefficient):
            cv_of(0.0, 0.1)

    def test_cv_inverse_check(self):
        # a distance elasticity of -0.62 with CV 0.10 implies se 0.062
        assert cv_of(-0.62, 0.062) == pytest.approx(0.10)

    def test_pseudo_r2_null_and_saturated(self):
        # null model: single-regressor fit on pure-intercept data
        dm = make_design([2.0, 2.0, 2.0, 2.0], np.ones((4, 1)), ("intercept",))
        fit = fit_ppml(dm)
        assert pseudo_r2(fit) == pytest.approx(0.0, abs=1e-12)
        # saturated two-group fit reproduces the data exactly
        y = [2.0, 2.0, 6.0, 6.0]
        X = np.column_stack([np.ones(4), [0.0, 0.0, 1.0, 1.0]])
        sat = fit_ppml(make_design(y, X, ("intercept", "d")), STRICT)
        assert pseudo_r2(sat) == pytest.approx(1.0, abs=1e-9)


def mv_obs(year, log_values):
    rows = []
    for v in log_values:
        cents = int(round(100.0 * math.exp(v)))
        rows.append(GravityObservation(
            year=year, iso="FR", value_cents=cents,
            attrs=attrs_row(iso="FR", year=year)))
    return rows


class TestMeanVarianceDiagnostic:
    def test_constant_values_slope_zero(self):
        data = mv_obs(2000, [10.0, 10.0, 10.0]) + mv_obs(2001, [11.0, 11.0])
        res = mean_variance_diagnostic(data)
        assert np.allclose(res.variances, 0.0, atol=1e-10)
        assert res.slope == pytest.approx(0.0, abs=1e-6)

    def test_constructed_linear_relationship(self):
        # per-year log values chosen so sample var = 1.4 * mean + 0.1
        data = []
        for year, m in zip(range(2000, 2005), [10.0, 10.5, 11.0, 11.5, 12.0]):
            s = math.sqrt((1.4 * m + 0.1) / 2.0)
            data += mv_obs(year, [m - s, m + s])
        res = mean_variance_diagnostic(data)

        # independent two-point slope from the achieved means/variances
        mc = res.means - res.means.mean()
        expected = float(mc @ (res.variances - res.variances.mean()) / (mc @ mc))
        assert res.slope == pytest.approx(expected, abs=1e-12)
        assert res.slope == pytest.approx(1.4, abs=1e-4)

    def test_two_identical_years(self):
        data = mv_obs(2000, [10.0, 12.0]) + mv_obs(2001, [10.0, 12.0])
        with pytest.raises(DegenerateSpread):
            mean_variance_diagnostic(data)

    def test_insufficient_years(self):
        with pytest.raises(InsufficientData):
            mean_variance_diagnostic(mv_obs(2000, [10.0, 11.0]))

    def test_year_with_single_positive_value(self):
        data = mv_obs(2000, [10.0, 11.0]) + mv_obs(2001, [10.0])
        with pytest.raises(InsufficientData):
            mean_variance_diagnostic(data)

    def test_zero_cells_skipped(self):
        zero = GravityObservation(year=2000, iso="FR", value_cents=0,
                                  attrs=attrs_row(iso="FR", year=2000))
        data = [zero] + mv_obs(2000, [10.0, 11.0]) + mv_obs(2001, [9.0, 12.0])
        res = mean_variance_diagnostic(data)
        assert len(res.years) == 2
