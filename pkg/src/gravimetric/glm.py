"""Gravity-model estimators and their diagnostics.

Three fits share one contract: OLS on logged values, Poisson PML, and
Negative-Binomial (NB2) PML, the latter two via iteratively reweighted
least squares with a log link and step-halving. Inference is cluster-robust
by destination with the G/(G-1) small-sample factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import gammaln, ndtri, xlogy

from .datamodel import FitResult, GravityObservation
from .design import DesignMatrix
from .errors import (
    AllZeroResponse,
    DegenerateSpread,
    HessianNotPositiveDefinite,
    InputError,
    InsufficientData,
    RankDeficient,
    SingularBread,
    ZeroCoefficient,
)

#: Two-sided 1% critical value of the standard normal.
_Z_1PCT = float(ndtri(0.995))

#: Linear-predictor clip bound; guards exp() overflow in early wild steps.
_ETA_CLIP = 300.0

_MAX_HALVINGS = 20

#: Lower/upper bounds for the NB2 dispersion search.
ALPHA_MIN = 1e-8
ALPHA_MAX = 1e4


@dataclass(frozen=True)
class EstimatorOptions:
    max_iterations: int = 100
    deviance_rel_tol: float = 1e-9
    coef_rel_tol: float = 1e-8
    ridge_jitter: float = 0.0

    def __post_init__(self):
        if self.deviance_rel_tol <= 0 or self.coef_rel_tol <= 0:
            raise InputError("tolerances must be positive")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be at least 1")


DEFAULT_OPTIONS = EstimatorOptions()


# ---------------------------------------------------------------------------
# linear algebra helpers

def _equilibrate(A):
    """Jacobi scaling to unit diagonal; separates column-scale effects from
    genuine near-collinearity before factorizing."""
    d = np.sqrt(np.diag(A))
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise scipy.linalg.LinAlgError("non-positive diagonal")
    scaled = A / np.outer(d, d)
    return scaled, d


def _solve_normal_equations(X, w, z, base_jitter):
    """Solve (X'WX) b = X'Wz by Cholesky, escalating a ridge jitter only
    when the weighted normal equations are singular."""
    Xw = X * w[:, None]
    A = X.T @ Xw
    b = Xw.T @ z
    jitter = base_jitter
    eye = np.eye(A.shape[0])
    for _ in range(6):
        try:
            scaled, d = _equilibrate(A)
            if jitter > 0.0:
                scaled = scaled + jitter * eye
            c = scipy.linalg.cho_factor(scaled, check_finite=False)
            return scipy.linalg.cho_solve(c, b / d, check_finite=False) / d
        except scipy.linalg.LinAlgError:
            jitter = max(jitter * 100.0, 1e-12)
    raise RankDeficient(["<weighted normal equations>"])


def _inverse_information(X, w):
    """Inverse of X'WX; raises SingularBread when the factorization fails.

    The matrix is equilibrated first, and a factorization that completes
    but cannot reconstruct the identity to 1e-6 is treated as numerically
    indefinite: such an inverse would silently yield meaningless
    covariances.
    """
    A = X.T @ (X * w[:, None])
    eye = np.eye(A.shape[0])
    try:
        scaled, d = _equilibrate(A)
        c = scipy.linalg.cho_factor(scaled, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularBread(str(exc)) from None
    inv_scaled = scipy.linalg.cho_solve(c, eye, check_finite=False)
    resid = np.max(np.abs(scaled @ inv_scaled - eye))
    if not np.isfinite(resid) or resid > 1e-6:
        raise SingularBread(
            f"factorization numerically indefinite (residual {resid:.2e})")
    return inv_scaled / np.outer(d, d)


def _sandwich(X, w, score_resid, clusters):
    """Cluster sandwich (X'WX)^-1 (sum_g s_g s_g') (X'WX)^-1 * G/(G-1).

    ``score_resid`` is the per-row scalar such that the score contribution
    is x_i * score_resid_i.
    """
    bread = _inverse_information(X, w)
    labels = np.asarray(clusters)
    _, inverse = np.unique(labels, return_inverse=True)
    n_clusters = int(inverse.max()) + 1
    if n_clusters < 2:
        raise InsufficientData("cluster-robust covariance needs >= 2 clusters")
    scores = X * score_resid[:, None]
    cluster_sums = np.zeros((n_clusters, X.shape[1]))
    np.add.at(cluster_sums, inverse, scores)
    meat = cluster_sums.T @ cluster_sums
    factor = n_clusters / (n_clusters - 1)
    cov = factor * bread @ meat @ bread
    return (cov + cov.T) / 2.0, n_clusters, factor


# ---------------------------------------------------------------------------
# families

def _poisson_deviance(y, mu):
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))


def _poisson_loglik(y, mu):
    return float(np.sum(xlogy(y, mu) - mu - gammaln(y + 1.0)))


def _nb2_deviance(y, mu, alpha):
    # log1p keeps the (y + 1/alpha) term stable as alpha -> 0
    r = 1.0 / alpha
    return float(2.0 * np.sum(
        xlogy(y, y / mu) - (y + r) * (np.log1p(alpha * y) - np.log1p(alpha * mu))))


def _nb2_loglik(y, mu, alpha):
    theta = 1.0 / alpha
    return float(np.sum(
        gammaln(y + theta) - gammaln(theta) - gammaln(y + 1.0)
        - theta * np.log1p(mu / theta) + xlogy(y, mu / (theta + mu))))


# ---------------------------------------------------------------------------
# IRLS core

def _irls(y, X, intercept_idx, options, weight_of_mu, deviance_of_mu):
    """Log-link IRLS with step-halving on deviance increase."""
    n, p = X.shape
    beta = np.zeros(p)
    if intercept_idx is not None:
        beta[intercept_idx] = math.log(float(y.mean()) + 1e-8)
    eta = np.clip(X @ beta, -_ETA_CLIP, _ETA_CLIP)
    mu = np.exp(eta)
    dev = deviance_of_mu(y, mu)
    converged = False
    iterations = 0

    for it in range(1, options.max_iterations + 1):
        iterations = it
        w = weight_of_mu(mu)
        z = eta + (y - mu) / mu
        proposal = _solve_normal_equations(X, w, z, options.ridge_jitter)
        step = proposal - beta

        cand, eta_new, mu_new, dev_new = beta, eta, mu, dev
        for h in range(_MAX_HALVINGS + 1):
            cand = beta + step * (0.5 ** h)
            eta_new = np.clip(X @ cand, -_ETA_CLIP, _ETA_CLIP)
            mu_new = np.exp(eta_new)
            dev_new = deviance_of_mu(y, mu_new)
            if math.isfinite(dev_new) and dev_new <= dev + 1e-12 * (abs(dev) + 1.0):
                break

        coef_change = float(np.max(np.abs(cand - beta))) / (1.0 + float(np.max(np.abs(beta))))
        dev_change = abs(dev - dev_new)
        beta, eta, mu, dev = cand, eta_new, mu_new, dev_new

        if (dev_change <= options.deviance_rel_tol * (abs(dev) + 0.1)
                or coef_change <= options.coef_rel_tol):
            converged = True
            break

    return beta, mu, dev, converged, iterations


def _check_nonneg_response(y):
    if np.any(y < 0):
        raise InputError("response has negative entries")
    if not np.any(y > 0):
        raise AllZeroResponse("response has no positive entries")


def _cv_map(names, beta, robust_cov):
    out = {}
    for i, name in enumerate(names):
        if robust_cov is None or beta[i] == 0.0:
            out[name] = None
        else:
            out[name] = float(np.sqrt(max(robust_cov[i, i], 0.0)) / abs(beta[i]))
    return out


def fit_ols(design: DesignMatrix) -> FitResult:
    """Least squares on the logged response.

    The design must have been built with a log response (zero rows already
    dropped). Reports adjusted R^2 and both model-based and cluster-robust
    covariances.
    """
    if design.spec_echo.response_scale != "log":
        raise InputError("fit_ols requires a log-scale response design")
    y, X = design.y, design.X
    n, p = X.shape

    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    rss = float(resid @ resid)
    has_intercept = "intercept" in design.columns
    tss = float(np.sum((y - y.mean()) ** 2)) if has_intercept else float(y @ y)

    dof = n - p
    cov_model = None
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    r2_adj = None
    if dof > 0:
        sigma2 = rss / dof
        cov_model = sigma2 * _inverse_information(X, np.ones(n))
        r2_adj = 1.0 - (1.0 - r2) * (n - 1) / dof

    cov_robust, n_clusters, factor = _sandwich(X, np.ones(n), resid, design.clusters)

    sigma2_mle = max(rss / n, 1e-300)
    loglik = -0.5 * n * (math.log(2.0 * math.pi * sigma2_mle) + 1.0)

    names = design.columns
    coefficients = {name: float(b) for name, b in zip(names, beta)}
    return FitResult(
        estimator="OLS",
        coefficients=coefficients,
        covariance_model=cov_model,
        covariance_robust=cov_robust,
        cv_per_coef=_cv_map(names, beta, cov_robust),
        loglik=loglik,
        deviance=rss,
        null_deviance=tss,
        pseudo_r2=r2 if has_intercept else None,
        r2_adjusted=r2_adj,
        n_obs=n,
        n_dropped_zeros=design.n_dropped_zeros,
        converged=True,
        iterations=1,
        n_clusters=n_clusters,
        small_sample_factor=factor,
    )


def fit_ppml(design: DesignMatrix, options: EstimatorOptions | None = None) -> FitResult:
    """Poisson pseudo-maximum-likelihood with a log link.

    Solves the Poisson score equations by IRLS. On exit the score identity
    X'(y - mu) = 0 holds to the convergence tolerance, and with an intercept
    the fitted values preserve the response total.
    """
    options = options or DEFAULT_OPTIONS
    if design.spec_echo.response_scale != "natural":
        raise InputError("fit_ppml requires a natural-scale response design")
    y, X = design.y, design.X
    _check_nonneg_response(y)
    intercept_idx = (design.columns.index("intercept")
                     if "intercept" in design.columns else None)

    beta, mu, dev, converged, iterations = _irls(
        y, X, intercept_idx, options,
        weight_of_mu=lambda m: m,
        deviance_of_mu=_poisson_deviance,
    )

    null_dev = _poisson_deviance(y, np.full_like(y, y.mean()))
    pseudo = 1.0 - dev / null_dev if (intercept_idx is not None and null_dev > 0) else None
    if intercept_idx is not None and null_dev <= 0:
        pseudo = 0.0

    cov_model = _inverse_information(X, mu)
    cov_robust, n_clusters, factor = _sandwich(X, mu, y - mu, design.clusters)

    names = design.columns
    coefficients = {name: float(b) for name, b in zip(names, beta)}
    return FitResult(
        estimator="PPML",
        coefficients=coefficients,
        covariance_model=cov_model,
        covariance_robust=cov_robust,
        cv_per_coef=_cv_map(names, beta, cov_robust),
        loglik=_poisson_loglik(y, mu),
        deviance=dev,
        null_deviance=null_dev,
        pseudo_r2=pseudo,
        n_obs=int(y.shape[0]),
        n_dropped_zeros=design.n_dropped_zeros,
        converged=converged,
        iterations=iterations,
        n_clusters=n_clusters,
        small_sample_factor=factor,
    )


def _alpha_moment_update(y, mu, n_params):
    """Dispersion solving mean Pearson chi-square = 1 under Var = mu + a mu^2.

    g(a) = sum (y-mu)^2 / (mu + a mu^2) - (n - p) is decreasing in a; the
    root is bracketed then bisected. Underdispersion pins a at ALPHA_MIN.
    """
    dof = max(y.shape[0] - n_params, 1)
    sq = (y - mu) ** 2

    def g(a):
        return float(np.sum(sq / (mu + a * mu * mu))) - dof

    if g(ALPHA_MIN) <= 0.0:
        return ALPHA_MIN
    if g(ALPHA_MAX) >= 0.0:
        return ALPHA_MAX
    lo, hi = ALPHA_MIN, ALPHA_MAX
    for _ in range(200):
        mid = math.sqrt(lo * hi)      # log-scale bisection over 12 decades
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return math.sqrt(lo * hi)


def fit_nbpml(design: DesignMatrix, options: EstimatorOptions | None = None) -> FitResult:
    """Negative-binomial (NB2) pseudo-maximum-likelihood, log mean link.

    The variance is mu + alpha mu^2; alpha comes from an outer
    moment-matching loop on Pearson residuals, iterated to relative 1e-6
    within [ALPHA_MIN, ALPHA_MAX]. If the expected Hessian at the solution
    fails a symmetric factorization, HessianNotPositiveDefinite is raised
    with the coefficient-only fit attached.
    """
    options = options or DEFAULT_OPTIONS
    if design.spec_echo.response_scale != "natural":
        raise InputError("fit_nbpml requires a natural-scale response design")
    y, X = design.y, design.X
    _check_nonneg_response(y)
    intercept_idx = (design.columns.index("intercept")
                     if "intercept" in design.columns else None)

    alpha = ALPHA_MIN
    beta = mu = None
    converged = False
    total_iterations = 0
    for _outer in range(50):
        beta, mu, _, converged, its = _irls(
            y, X, intercept_idx, options,
            weight_of_mu=lambda m: m / (1.0 + alpha * m),
            deviance_of_mu=lambda yy, mm: _nb2_deviance(yy, mm, alpha),
        )
        total_iterations += its
        alpha_new = _alpha_moment_update(y, mu, X.shape[1])
        rel = abs(alpha_new - alpha) / max(alpha, ALPHA_MIN)
        alpha = alpha_new
        if rel <= 1e-6:
            break
    else:
        converged = False

    dev = _nb2_deviance(y, mu, alpha)
    null_dev = _nb2_deviance(y, np.full_like(y, y.mean()), alpha)
    pseudo = 1.0 - dev / null_dev if (intercept_idx is not None and null_dev > 0) else None
    if intercept_idx is not None and null_dev <= 0:
        pseudo = 0.0

    names = design.columns
    coefficients = {name: float(b) for name, b in zip(names, beta)}
    base = dict(
        estimator="NBPML",
        coefficients=coefficients,
        loglik=_nb2_loglik(y, mu, alpha),
        deviance=dev,
        null_deviance=null_dev,
        pseudo_r2=pseudo,
        dispersion=float(alpha),
        n_obs=int(y.shape[0]),
        n_dropped_zeros=design.n_dropped_zeros,
        converged=converged,
        iterations=total_iterations,
    )

    w = mu / (1.0 + alpha * mu)
    try:
        cov_model = _inverse_information(X, w)
    except SingularBread:
        bare = FitResult(covariance_model=None, covariance_robust=None,
                         cv_per_coef=_cv_map(names, beta, None), **base)
        raise HessianNotPositiveDefinite(bare) from None

    cov_robust, n_clusters, factor = _sandwich(
        X, w, (y - mu) / (1.0 + alpha * mu), design.clusters)
    return FitResult(
        covariance_model=cov_model,
        covariance_robust=cov_robust,
        cv_per_coef=_cv_map(names, beta, cov_robust),
        n_clusters=n_clusters,
        small_sample_factor=factor,
        **base,
    )


def cluster_robust_cov(fit: FitResult, design: DesignMatrix) -> np.ndarray:
    """Recompute the cluster sandwich for a fit from its design.

    Matches the covariance_robust the fit itself reports; exposed so the
    covariance can be recomputed or checked independently of fitting.
    """
    beta = np.array([fit.coefficients[name] for name in design.columns])
    X, y = design.X, design.y
    if fit.estimator == "OLS":
        w = np.ones(X.shape[0])
        score_resid = y - X @ beta
    elif fit.estimator == "PPML":
        mu = np.exp(np.clip(X @ beta, -_ETA_CLIP, _ETA_CLIP))
        w = mu
        score_resid = y - mu
    elif fit.estimator == "NBPML":
        if fit.dispersion is None:
            raise InputError("NBPML fit is missing its dispersion")
        mu = np.exp(np.clip(X @ beta, -_ETA_CLIP, _ETA_CLIP))
        w = mu / (1.0 + fit.dispersion * mu)
        score_resid = (y - mu) / (1.0 + fit.dispersion * mu)
    else:
        raise InputError(f"unknown estimator '{fit.estimator}'")
    cov, _, _ = _sandwich(X, w, score_resid, design.clusters)
    return cov


def pseudo_r2(fit: FitResult) -> float:
    """One minus the ratio of fitted to null deviance."""
    if fit.null_deviance <= 0:
        return 0.0
    return 1.0 - fit.deviance / fit.null_deviance


def percent_effect(beta: float) -> float:
    """Percent level shift implied by an indicator coefficient."""
    return (math.exp(beta) - 1.0) * 100.0


def cv_of(coef: float, robust_se: float) -> float:
    """Coefficient of variation: robust SE over |estimate|."""
    if coef == 0.0:
        raise ZeroCoefficient("coefficient of variation undefined for 0")
    return robust_se / abs(coef)


@dataclass(frozen=True)
class MeanVarianceResult:
    years: tuple[int, ...]
    means: np.ndarray
    variances: np.ndarray
    slope: float


def mean_variance_diagnostic(dataset: Sequence[GravityObservation]) -> MeanVarianceResult:
    """Per-year mean and variance of log value, and the variance-on-mean
    OLS slope across years. Zero-value cells are skipped (log undefined)."""
    by_year: dict[int, list[float]] = {}
    for o in dataset:
        if o.value_cents > 0:
            by_year.setdefault(o.year, []).append(math.log(o.value_cents / 100.0))
    if len(by_year) < 2:
        raise InsufficientData("need at least 2 years with positive values")
    for year, vals in by_year.items():
        if len(vals) < 2:
            raise InsufficientData(f"year {year} has fewer than 2 positive values")

    years = tuple(sorted(by_year))
    means = np.array([np.mean(by_year[t]) for t in years])
    variances = np.array([np.var(by_year[t], ddof=1) for t in years])

    mc = means - means.mean()
    sxx = float(mc @ mc)
    if sxx == 0.0:
        raise DegenerateSpread("per-year means are identical; slope undefined")
    slope = float(mc @ (variances - variances.mean()) / sxx)
    return MeanVarianceResult(years=years, means=means, variances=variances,
                              slope=slope)


def significant_at_1pct(coef: float, robust_se: float) -> bool:
    """Two-sided test against the normal 1% critical value."""
    if robust_se == 0.0:
        return coef != 0.0
    return abs(coef / robust_se) > _Z_1PCT


def write_coefficient_csv(path, fit: FitResult) -> None:
    """Flat coefficient table: name, estimate, robust_se, cv, significance."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "estimate", "robust_se", "cv", "significant_at_1pct"])
        for i, (name, est) in enumerate(fit.coefficients.items()):
            if fit.covariance_robust is None:
                se_s, cv_s, sig = "", "", ""
            else:
                se = float(np.sqrt(max(fit.covariance_robust[i, i], 0.0)))
                cv = fit.cv_per_coef.get(name)
                se_s = repr(se)
                cv_s = "" if cv is None else repr(float(cv))
                sig = "1" if significant_at_1pct(est, se) else "0"
            w.writerow([name, repr(float(est)), se_s, cv_s, sig])
