"""Three-factor CBD baseline: Poisson fitting and random-walk forecasting.

The model puts logit(q_{x,t}) = kappa1_t + kappa2_t * (x - x_bar) +
gamma3_{t-x}. Death counts are Poisson with mean E * m(eta) where
m(eta) = log(1 + exp(eta)), and the parameters are estimated by blockwise
Newton ascent of the Poisson log-likelihood. The cohort series is pinned
down by the two identifiability constraints sum(gamma) = 0 and
sum((t-x) * gamma) = 0 over the fitted cohort set, re-imposed after every
sweep through the likelihood-invariant reparameterization.

Forecasting is the classical two-step approach: a bivariate random walk
with drift for (kappa1, kappa2) and a univariate one for the cohort
series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special

from .data import initial_to_central
from .errors import FactorizationError
from .forecasts import Forecast

#: cohorts observed in fewer cells than this are dropped from the fit
MIN_COHORT_CELLS = 3


@dataclass(frozen=True)
class CbdFit:
    """Fitted CBD parameter curves and fit metadata.

    ``gamma3`` spans the full cohort axis ``cohorts``; entries outside the
    fitted set (``included`` False, sparse corner cohorts) are 0 by
    convention and their cells carry no likelihood weight.
    """

    ages: np.ndarray
    years: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    gamma3: np.ndarray
    cohorts: np.ndarray
    included: np.ndarray
    x_bar: float
    loglik: float
    loglik_trace: np.ndarray
    constraint_residuals: tuple[float, float]
    converged: bool
    n_sweeps: int


@dataclass(frozen=True)
class RwDrift:
    """Random-walk-with-drift estimates for the CBD parameter series.

    ``V = K' K`` with ``K`` upper triangular; ``mu`` and ``var_dgamma`` are
    the drift and difference variance of the cohort series.
    """

    d: np.ndarray
    V: np.ndarray
    K: np.ndarray
    mu: float
    var_dgamma: float
    divisor: str = "n"


def cohort_labels(ages, years) -> np.ndarray:
    """Consecutive cohort labels years[0]-ages[-1] .. years[-1]-ages[0]."""
    ages = np.asarray(ages, dtype=int)
    years = np.asarray(years, dtype=int)
    return np.arange(years[0] - ages[-1], years[-1] - ages[0] + 1)


def _cohort_cols(ages, years, cohorts) -> np.ndarray:
    """(n, m) grid of indices into the cohort axis, entry (i, j) for t_i - x_j."""
    years = np.asarray(years, dtype=int)
    ages = np.asarray(ages, dtype=int)
    return (years[:, None] - ages[None, :]) - cohorts[0]


def linear_predictor(kappa1, kappa2, gamma3, ages, years, cohorts=None) -> np.ndarray:
    """(n, m) grid of eta = kappa1_t + kappa2_t (x - x_bar) + gamma3_{t-x}."""
    ages = np.asarray(ages, dtype=int)
    years = np.asarray(years, dtype=int)
    if cohorts is None:
        cohorts = cohort_labels(ages, years)
    cols = _cohort_cols(ages, years, cohorts)
    w = ages - float(np.mean(ages))
    return (
        np.asarray(kappa1)[:, None]
        + np.asarray(kappa2)[:, None] * w[None, :]
        + np.asarray(gamma3)[cols]
    )


def death_rate(eta) -> np.ndarray:
    """Central rate implied by the logit-scale predictor: log(1 + exp(eta))."""
    return np.logaddexp(0.0, eta)


def cbd_poisson_loglik(
    kappa1, kappa2, gamma3, ages, years, D, E, weights=None
) -> float:
    """Poisson log-likelihood sum of D log(E m) - E m - log(D!).

    ``weights`` (0/1 per cell) drops cells of excluded cohorts; log(D!) is
    evaluated with log-gamma so non-integer synthesized counts are fine.
    """
    D = np.asarray(D, dtype=float)
    E = np.asarray(E, dtype=float)
    if np.any(E <= 0):
        raise ValueError("exposures must be strictly positive")
    if np.any(D < 0):
        raise ValueError("death counts must be >= 0")
    eta = linear_predictor(kappa1, kappa2, gamma3, ages, years)
    if not np.all(np.isfinite(eta)):
        raise ValueError("non-finite linear predictor")
    mu = E * death_rate(eta)
    terms = scipy.special.xlogy(D, mu) - mu - scipy.special.gammaln(D + 1.0)
    if weights is not None:
        terms = terms * weights
    return float(np.sum(terms))


def transform_parameters(kappa1, kappa2, gamma3, phi1, phi2, ages, years):
    """The identifiability map leaving every fitted rate unchanged.

    (kappa1_t, kappa2_t, gamma_{t-x}) -> (kappa1_t + phi1 + phi2 (t - x_bar),
    kappa2_t - phi2, gamma_{t-x} - phi1 - phi2 (t - x)).
    """
    ages = np.asarray(ages, dtype=int)
    years = np.asarray(years, dtype=int)
    cohorts = cohort_labels(ages, years)
    x_bar = float(np.mean(ages))
    k1 = np.asarray(kappa1, dtype=float) + phi1 + phi2 * (years - x_bar)
    k2 = np.asarray(kappa2, dtype=float) - phi2
    g3 = np.asarray(gamma3, dtype=float) - phi1 - phi2 * cohorts
    return k1, k2, g3


def _cell_terms(eta, D, E):
    """Per-cell first/second derivatives of the Poisson LL wrt eta.

    U = D sigma/m - E sigma, H = D sigma'/m - E sigma' - D (sigma/m)^2;
    the ratios tend to 1 as eta -> -inf, substituted directly below the
    underflow point. H < 0 everywhere, so Newton steps are well defined.
    """
    m = np.maximum(np.logaddexp(0.0, eta), 1e-300)
    sig = scipy.special.expit(eta)
    dsig = sig * (1.0 - sig)
    low = eta < -30.0
    r1 = np.where(low, 1.0, sig / m)
    r2 = np.where(low, 1.0, dsig / m)
    U = D * r1 - E * sig
    H = D * r2 - E * dsig - D * r1**2
    return U, H


def _initial_curves(D, E, ages, years):
    m_hat = np.clip(D / E, 1e-10, None)
    q_hat = np.clip(-np.expm1(-m_hat), 1e-12, 1.0 - 1e-12)
    y_hat = np.log(q_hat) - np.log1p(-q_hat)
    w = ages - float(np.mean(ages))
    kappa1 = y_hat.mean(axis=1)
    kappa2 = (y_hat * w).sum(axis=1) / float(w @ w)
    return kappa1, kappa2


def _apply_constraints(kappa1, kappa2, gamma3, included, cohorts, ages, years):
    """Regress gamma on (1, cohort) over the fitted set and absorb the line
    into the kappa curves via the invariance map; returns phi1, phi2."""
    cs = cohorts[included].astype(float)
    X = np.column_stack([np.ones(cs.size), cs])
    phi, *_ = np.linalg.lstsq(X, gamma3[included], rcond=None)
    phi1, phi2 = float(phi[0]), float(phi[1])
    x_bar = float(np.mean(ages))
    kappa1 += phi1 + phi2 * (years - x_bar)
    kappa2 -= phi2
    gamma3[included] -= phi1 + phi2 * cs
    return phi1, phi2


def fit_cbd(
    D,
    E,
    ages,
    years,
    min_cohort_cells: int = MIN_COHORT_CELLS,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
) -> CbdFit:
    """Maximize the Poisson log-likelihood by blockwise Newton sweeps.

    Each sweep takes a joint Newton step on (kappa1_t, kappa2_t) for every
    year, then a Newton step on every fitted gamma3 coordinate (blocks are
    separable given the others), then re-imposes the two cohort constraints
    through the likelihood-invariant reparameterization. Cohorts observed
    in fewer than ``min_cohort_cells`` cells are excluded: their cells get
    zero likelihood weight and their gamma stays 0. A sweep that fails to
    improve the likelihood is retried with halved Newton steps.
    """
    D = np.asarray(D, dtype=float)
    E = np.asarray(E, dtype=float)
    ages = np.asarray(ages, dtype=int)
    years = np.asarray(years, dtype=int)
    n, m = years.size, ages.size
    if D.shape != (n, m) or E.shape != (n, m):
        raise ValueError(f"D/E grids must have shape ({n}, {m})")
    if np.any(E <= 0):
        raise ValueError("exposures must be strictly positive")
    if np.any(D < 0):
        raise ValueError("death counts must be >= 0")

    cohorts = cohort_labels(ages, years)
    cols = _cohort_cols(ages, years, cohorts)
    counts = np.bincount(cols.ravel(), minlength=cohorts.size)
    included = counts >= min_cohort_cells
    if not np.any(included):
        raise ValueError(
            f"no cohort reaches {min_cohort_cells} observed cells; grid too small"
        )
    w = included[cols].astype(float)
    wD, wE = w * D, w * E
    xw = ages - float(np.mean(ages))
    flat_cols = cols.ravel()

    kappa1, kappa2 = _initial_curves(D, E, ages, years)
    gamma3 = np.zeros(cohorts.size)

    def eta_of(k1, k2, g3):
        return k1[:, None] + k2[:, None] * xw[None, :] + g3[cols]

    def ll_of(eta):
        mu = wE * death_rate(eta)
        return float(
            np.sum(scipy.special.xlogy(wD, mu) - mu)
            - np.sum(w * scipy.special.gammaln(D + 1.0))
        )

    _apply_constraints(kappa1, kappa2, gamma3, included, cohorts, ages, years)
    ll = ll_of(eta_of(kappa1, kappa2, gamma3))
    trace = [ll]
    converged = False
    sweeps = 0

    while sweeps < max_sweeps:
        sweeps += 1
        snapshot = (kappa1.copy(), kappa2.copy(), gamma3.copy())
        accepted = False
        damping = 1.0
        for _ in range(12):
            k1, k2, g3 = (s.copy() for s in snapshot)

            # joint 2x2 Newton step per year for (kappa1_t, kappa2_t); the
            # per-year Hessian blocks are negative definite when the year
            # has weighted cells at two or more ages. A year whose weighted
            # cells sit at a single age (possible on very narrow grids)
            # leaves the pair unidentified along a ridge; move kappa1 alone
            # there, which fixes the identified combination.
            eta = eta_of(k1, k2, g3)
            U, H = _cell_terms(eta, wD, wE)
            wU, wH = w * U, w * H
            g1 = wU.sum(axis=1)
            g2 = (wU * xw).sum(axis=1)
            h11 = wH.sum(axis=1)
            h12 = (wH * xw).sum(axis=1)
            h22 = (wH * xw**2).sum(axis=1)
            det = h11 * h22 - h12**2
            full_rank = np.abs(det) > 1e-12 * (np.abs(h11 * h22) + 1e-300)
            det_safe = np.where(full_rank, det, 1.0)
            dk1 = np.where(full_rank, -(h22 * g1 - h12 * g2) / det_safe,
                           -g1 / h11)
            dk2 = np.where(full_rank, -(h11 * g2 - h12 * g1) / det_safe, 0.0)
            k1 += damping * dk1
            k2 += damping * dk2

            eta = eta_of(k1, k2, g3)
            U, H = _cell_terms(eta, wD, wE)
            gsum = np.bincount(flat_cols, weights=(w * U).ravel(), minlength=cohorts.size)
            hsum = np.bincount(flat_cols, weights=(w * H).ravel(), minlength=cohorts.size)
            g3[included] += damping * (-gsum[included] / hsum[included])

            _apply_constraints(k1, k2, g3, included, cohorts, ages, years)
            ll_new = ll_of(eta_of(k1, k2, g3))
            if np.isfinite(ll_new) and ll_new >= ll - 1e-9:
                accepted = True
                break
            damping *= 0.5
        if not accepted:
            break
        kappa1, kappa2, gamma3 = k1, k2, g3
        dll = ll_new - ll
        ll = ll_new
        trace.append(ll)
        if abs(dll) <= tol * (1.0 + abs(ll)):
            converged = True
            break

    cs = cohorts[included].astype(float)
    residuals = (
        float(np.sum(gamma3[included])),
        float(np.sum(cs * gamma3[included])),
    )
    return CbdFit(
        ages=ages,
        years=years,
        kappa1=kappa1,
        kappa2=kappa2,
        gamma3=gamma3,
        cohorts=cohorts,
        included=included,
        x_bar=float(np.mean(ages)),
        loglik=ll,
        loglik_trace=np.asarray(trace),
        constraint_residuals=residuals,
        converged=converged,
        n_sweeps=sweeps,
    )


def fitted_logit(fit: CbdFit) -> np.ndarray:
    """In-sample logit-rate grid from the fitted parameter curves.

    Cells of excluded cohorts use gamma = 0; they were not part of the fit.
    """
    return linear_predictor(
        fit.kappa1, fit.kappa2, fit.gamma3, fit.ages, fit.years, fit.cohorts
    )


def _chol_upper(V):
    try:
        return np.linalg.cholesky(V).T, V
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-12 * max(1.0, float(np.mean(np.diag(V))))
    Vj = V + jitter * np.eye(V.shape[0])
    try:
        return np.linalg.cholesky(Vj).T, Vj
    except np.linalg.LinAlgError:
        raise FactorizationError(
            "difference covariance not positive semi-definite"
        ) from None


def estimate_rw(fit: CbdFit, divisor: str = "n") -> RwDrift:
    """Random-walk-with-drift estimates from the fitted parameter series.

    ``d`` and ``V`` are the mean and (centered) mean outer product of the
    first differences of (kappa1, kappa2); ``mu``/``var_dgamma`` are the
    analogues for the cohort series over its fitted range. ``divisor="n"``
    averages over the number of differences as the expectation notation
    reads; ``"n-1"`` switches to the unbiased denominator.
    """
    if divisor not in ("n", "n-1"):
        raise ValueError(f"divisor must be 'n' or 'n-1', got {divisor!r}")
    if fit.years.size < 3:
        raise ValueError("need at least 3 fitted years to estimate the random walk")
    dk = np.column_stack([np.diff(fit.kappa1), np.diff(fit.kappa2)])
    d = dk.mean(axis=0)
    centered = dk - d
    denom = dk.shape[0] if divisor == "n" else dk.shape[0] - 1
    V = (centered.T @ centered) / denom
    K, _ = _chol_upper(V)

    g = fit.gamma3[fit.included]
    if g.size < 2:
        raise ValueError("fitted cohort series too short for drift estimation")
    dg = np.diff(g)
    mu = float(dg.mean())
    gden = dg.size if divisor == "n" else max(dg.size - 1, 1)
    var_dgamma = float(np.sum((dg - mu) ** 2) / gden)
    return RwDrift(d=d, V=V, K=K, mu=mu, var_dgamma=var_dgamma, divisor=divisor)


def forecast_cbd(
    fit: CbdFit, drift: RwDrift, horizon: int, alpha: float = 0.05
) -> Forecast:
    """Extrapolate the parameter curves h years ahead.

    kappa means move by the drift each year with Var = (steps ahead) * V
    mapped through [1, x - x_bar]. Cohorts beyond the last fitted one take
    the univariate recursion from the last fitted cohort value, stepping
    over the sparse excluded labels, and contribute (extrapolated steps) *
    var_dgamma to the cell variance. Training-year rows carry the fitted
    values with zero variance.
    """
    if horizon < 1:
        raise ValueError("forecast horizon must be >= 1")
    n, m = fit.years.size, fit.ages.size
    years_all = np.arange(fit.years[0], fit.years[-1] + horizon + 1)
    mean = np.empty((n + horizon, m))
    var = np.zeros((n + horizon, m))
    mean[:n] = fitted_logit(fit)

    last_fitted_cohort = int(fit.cohorts[fit.included][-1])
    gamma_base = float(fit.gamma3[fit.included][-1])
    xw = fit.ages - fit.x_bar

    def gamma_at(c: int) -> tuple[float, int]:
        """Cohort value and number of extrapolated steps for label c."""
        if c <= last_fitted_cohort:
            idx = c - int(fit.cohorts[0])
            if idx < 0:
                raise ValueError(f"cohort {c} predates the fitted axis")
            return float(fit.gamma3[idx]), 0
        steps = c - last_fitted_cohort
        return gamma_base + steps * drift.mu, steps

    for k in range(1, horizon + 1):
        t = int(fit.years[-1]) + k
        k1 = float(fit.kappa1[-1]) + k * drift.d[0]
        k2 = float(fit.kappa2[-1]) + k * drift.d[1]
        Vk = k * drift.V
        for j, x in enumerate(fit.ages):
            g, steps = gamma_at(t - int(x))
            mean[n + k - 1, j] = k1 + k2 * xw[j] + g
            load = np.array([1.0, xw[j]])
            var[n + k - 1, j] = float(load @ Vk @ load) + steps * drift.var_dgamma

    return Forecast(
        ages=fit.ages,
        years=years_all,
        horizon=horizon,
        mean=mean,
        variance=var,
    )


def synthesize_counts(q: np.ndarray, exposure: float = 1e5):
    """Back out (D, E) grids from initial rates with a flat exposure level.

    Used when a data source provides rates only: m = -log(1 - q), E is
    constant, D = E * m (non-integer counts are fine for the fitting
    routines).
    """
    q = np.asarray(q, dtype=float)
    m = initial_to_central(q)
    E = np.full_like(q, float(exposure))
    return E * m, E
