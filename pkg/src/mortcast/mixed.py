"""Gaussian mixed-effects time-series model: fitting, BLUPs and forecasting.

The observation vector Y (stacked age-major) follows N(T beta, V) with
V = Z1 K1 Z1' + Z2 K2 Z2' + Z3 K3 Z3' + sigma2 I. Hyperparameters are
estimated by maximizing the marginal log-likelihood; the random-effect
vectors are then recovered as conditional means given Y (BLUPs), and
forecasts extend the cohort effect through its covariance with the
training cohorts.

Hyperparameters are optimized in log space so positivity is structural,
with a BFGS ascent and a backtracking line search; every accepted step
increases the likelihood, so the trace is monotone by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .design import (
    DesignSet,
    KernelParams,
    build_covariances,
    build_design,
    build_forecast_covariances,
    cholesky_with_jitter,
    se_kernel,
    _assemble_V_from_kernels,
)
from .errors import FactorizationError
from .forecasts import Forecast

LOG2PI = math.log(2.0 * math.pi)

#: log-parameter clip keeping exp() strictly positive and finite
_LOG_BOUND = 230.0


@dataclass(frozen=True)
class FixedEffects:
    """Estimated fixed intercept/slope with a 2x2 covariance."""

    beta: np.ndarray
    cov_beta: np.ndarray

    @property
    def beta1(self) -> float:
        return float(self.beta[0])

    @property
    def beta2(self) -> float:
        return float(self.beta[1])


@dataclass(frozen=True)
class RandomEffects:
    """Conditional means and covariances of the three random-effect vectors.

    ``gamma1``/``gamma2`` live on the age axis, ``gamma3`` on the cohort
    axis of the design it was computed against (training, or extended when
    produced by :func:`forecast`).
    """

    gamma1: np.ndarray
    cov1: np.ndarray
    gamma2: np.ndarray
    cov2: np.ndarray
    gamma3: np.ndarray
    cov3: np.ndarray


@dataclass(frozen=True)
class MixedFit:
    """Result of a marginal-likelihood fit on a training design."""

    params: KernelParams
    fixed: FixedEffects
    random: RandomEffects
    loglik: float
    loglik_trace: np.ndarray
    design: DesignSet
    converged: bool
    n_iter: int
    sigma2_boundary: bool
    y: np.ndarray
    beta_cov_policy: str


def stack_grid(grid: np.ndarray) -> np.ndarray:
    """Stack a (years x ages) grid age-major to match the design rows."""
    return np.asarray(grid, dtype=float).T.ravel()


def unstack_vector(vec: np.ndarray, n_years: int, n_ages: int) -> np.ndarray:
    """Inverse of :func:`stack_grid`."""
    return np.asarray(vec, dtype=float).reshape(n_ages, n_years).T


def _as_stacked(y, design: DesignSet) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    N = design.T.shape[0]
    if y.ndim == 2:
        if y.shape != (design.n_train + design.horizon, design.n_ages):
            raise ValueError(
                f"grid shape {y.shape} does not match design "
                f"({design.n_train + design.horizon} years x {design.n_ages} ages)"
            )
        y = stack_grid(y)
    if y.shape != (N,):
        raise ValueError(f"expected {N} stacked observations, got shape {y.shape}")
    return y


def _factor_V(params: KernelParams, design: DesignSet):
    """(cho, logdet, kernels) for V(params) on a training design."""
    K1, K2, K3 = build_covariances(params, design)
    V = _assemble_V_from_kernels(params.sigma2, design, K1, K2, K3)
    L, _ = cholesky_with_jitter(V)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return (L, True), logdet, (K1, K2, K3)


def log_likelihood(y, beta, params: KernelParams, design: DesignSet) -> float:
    """Gaussian log-density of Y under N(T beta, V(params)).

    Computed through the Cholesky factor (log-determinant from the factor
    diagonal, quadratic form via triangular solves); V is never inverted
    explicitly.
    """
    y = _as_stacked(y, design)
    beta = np.asarray(beta, dtype=float)
    cho, logdet, _ = _factor_V(params, design)
    r = y - design.T @ beta
    quad = float(r @ scipy.linalg.cho_solve(cho, r, check_finite=False))
    return -0.5 * logdet - 0.5 * quad - 0.5 * y.size * LOG2PI


def gls_beta(y, params: KernelParams, design: DesignSet) -> np.ndarray:
    """Closed-form maximizer beta = (T' V^-1 T)^-1 T' V^-1 Y."""
    y = _as_stacked(y, design)
    cho, _, _ = _factor_V(params, design)
    return _gls_from_cho(y, design.T, cho)[0]


def _gls_from_cho(y, T, cho):
    S = scipy.linalg.cho_solve(cho, np.column_stack([T, y]), check_finite=False)
    ViT, Viy = S[:, :2], S[:, 2]
    G = T.T @ ViT
    # 2x2 normal matrix; exact singularity only with a single distinct year
    if abs(np.linalg.det(G)) <= 1e-14 * (abs(G[0, 0] * G[1, 1]) + 1e-300):
        raise np.linalg.LinAlgError("collinear fixed-effects design (single year?)")
    beta = np.linalg.solve(G, T.T @ Viy)
    a = Viy - ViT @ beta  # V^-1 (y - T beta)
    return beta, a, G, ViT


def _kernel_partials(K, dist2, amplitude, length):
    """d K / d amplitude and d K / d length for the 2*length convention."""
    dK_damp = (2.0 / amplitude) * K
    dK_dlen = K * (dist2 / (2.0 * length**2))
    return dK_damp, dK_dlen


def _trace_inverse(L):
    """tr(V^-1) from the lower Cholesky factor: squared Frobenius norm of
    L^-1, inverted in place by LAPACK trtri when available."""
    (trtri,) = scipy.linalg.get_lapack_funcs(("trtri",), (L,))
    Linv, info = trtri(L, lower=1)
    if info != 0:
        Linv = scipy.linalg.solve_triangular(
            L, np.eye(L.shape[0]), lower=True, check_finite=False
        )
    return float(np.sum(Linv * Linv))


def grad_loglik(y, beta, params: KernelParams, design: DesignSet) -> np.ndarray:
    """Analytic gradient of :func:`log_likelihood` in the order
    [h1, l1, h2, l2, c, s, sigma2].

    For each covariance parameter the derivative is
    -1/2 tr(V^-1 dV) + 1/2 r' V^-1 dV V^-1 r with r = Y - T beta, and
    dV/dsigma2 = I.
    """
    y = _as_stacked(y, design)
    beta = np.asarray(beta, dtype=float)
    cho, _, kernels = _factor_V(params, design)
    r = y - design.T @ beta
    rhs = np.column_stack([r, design.Z1, design.Z2, design.Z3])
    S = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
    m = design.n_ages
    a = S[:, 0]
    solved_Z = (S[:, 1 : 1 + m], S[:, 1 + m : 1 + 2 * m], S[:, 1 + 2 * m :])
    return _grad_from_solves(params, design, kernels, cho[0], a, solved_Z)


def _grad_from_solves(params, design, kernels, L, a, solved_Z):
    """Gradient given V's factor, a = V^-1 r and the solves V^-1 [Z1 Z2 Z3]."""
    K1, K2, K3 = kernels
    B1, B2, B3 = solved_Z
    ages = design.ages.astype(float)
    dx2 = (ages[:, None] - ages[None, :]) ** 2
    coh = design.cohort_index.astype(float)
    dc2 = (coh[:, None] - coh[None, :]) ** 2

    g = np.empty(7)
    for slot, (Z, B, K, d2, amp, length) in enumerate(
        [
            (design.Z1, B1, K1, dx2, params.h1, params.l1),
            (design.Z2, B2, K2, dx2, params.h2, params.l2),
            (design.Z3, B3, K3, dc2, params.c, params.s),
        ]
    ):
        W = Z.T @ B  # Z' V^-1 Z
        b = Z.T @ a
        dKa, dKl = _kernel_partials(K, d2, amp, length)
        g[2 * slot] = -0.5 * float(np.sum(W * dKa)) + 0.5 * float(b @ dKa @ b)
        g[2 * slot + 1] = -0.5 * float(np.sum(W * dKl)) + 0.5 * float(b @ dKl @ b)

    g[6] = -0.5 * _trace_inverse(L) + 0.5 * float(a @ a)
    return g


class _ProfileObjective:
    """Profile log-likelihood (beta solved exactly) over log parameters.

    A boolean ``free`` mask selects which of the 7 log parameters are
    optimized; the rest stay at their initial values. One Cholesky solve
    against the fixed block [T | y | Z1 | Z2 | Z3] per evaluation serves
    both the likelihood and the gradient.
    """

    def __init__(self, y, design, free):
        self.y = y
        self.design = design
        self.free = free
        self.rhs = np.column_stack([design.T, y, design.Z1, design.Z2, design.Z3])

    def evaluate(self, u_full):
        """LL, GLS beta and reusable solver state at exp(u_full)."""
        d = self.design
        params = KernelParams.from_array(np.exp(u_full))
        cho, logdet, kernels = _factor_V(params, d)
        S = scipy.linalg.cho_solve(cho, self.rhs, check_finite=False)
        ViT, Viy = S[:, :2], S[:, 2]
        G = d.T.T @ ViT
        if abs(np.linalg.det(G)) <= 1e-14 * (abs(G[0, 0] * G[1, 1]) + 1e-300):
            raise np.linalg.LinAlgError("collinear fixed-effects design")
        beta = np.linalg.solve(G, d.T.T @ Viy)
        a = Viy - ViT @ beta  # V^-1 (y - T beta)
        r = self.y - d.T @ beta
        ll = -0.5 * logdet - 0.5 * float(r @ a) - 0.5 * self.y.size * LOG2PI
        m = d.n_ages
        solved_Z = (S[:, 3 : 3 + m], S[:, 3 + m : 3 + 2 * m], S[:, 3 + 2 * m :])
        return {
            "u": u_full.copy(),
            "params": params,
            "L": cho[0],
            "beta": beta,
            "a": a,
            "kernels": kernels,
            "solved_Z": solved_Z,
            "ll": ll,
        }

    def gradient(self, state):
        """Gradient of the profile LL wrt the free log parameters.

        beta is at its exact optimum, so the profile gradient equals the
        partial gradient there (envelope argument).
        """
        g_theta = _grad_from_solves(
            state["params"],
            self.design,
            state["kernels"],
            state["L"],
            state["a"],
            state["solved_Z"],
        )
        g_u = state["params"].as_array() * g_theta
        return g_u[self.free]


def _bfgs_ascent(objective, u0, free, tol, max_iter):
    """Maximize the profile LL from u0; returns (state, trace, converged, iters).

    Accepted steps satisfy an Armijo condition on -LL, so the likelihood
    trace is nondecreasing. Trial points that fail factorization or go
    non-finite are rejected by backtracking.
    """
    u = np.clip(u0, -_LOG_BOUND, _LOG_BOUND)
    state = objective.evaluate(u)
    if not np.isfinite(state["ll"]):
        raise ValueError("non-finite log-likelihood at the initial parameters")
    g = objective.gradient(state)
    trace = [state["ll"]]
    nfree = int(np.sum(free))
    H = np.eye(nfree)
    converged = False
    last_small = False
    it = 0

    while it < max_iter:
        it += 1
        gf = -g  # gradient of the objective being minimized
        d = -H @ gf
        if float(d @ gf) >= 0.0:  # not a descent direction: reset
            H = np.eye(nfree)
            d = -gf
        step_inf = float(np.max(np.abs(d))) if nfree else 0.0
        if step_inf > 5.0:
            d *= 5.0 / step_inf
        slope = float(gf @ d)
        if slope >= 0.0:
            break

        accepted = False
        alpha = 1.0
        for _ in range(60):
            u_try = u.copy()
            u_try[free] = np.clip(u[free] + alpha * d, -_LOG_BOUND, _LOG_BOUND)
            try:
                cand = objective.evaluate(u_try)
            except (FactorizationError, np.linalg.LinAlgError):
                cand = None
            if cand is not None and np.isfinite(cand["ll"]):
                sufficient = -cand["ll"] <= -state["ll"] + 1e-4 * alpha * slope
                # strict improvement required: deep backtracking must not
                # accept zero-progress steps once the Armijo term underflows
                if sufficient and cand["ll"] > state["ll"]:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            # stalled: converged if the gradient is already negligible
            converged = float(np.max(np.abs(g))) <= 1e-5 * (1.0 + abs(state["ll"]))
            break

        g_new = objective.gradient(cand)
        s = cand["u"][free] - u[free]
        y_diff = (-g_new) - gf
        sy = float(s @ y_diff)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y_diff) + 1e-300):
            if it == 1:
                H = (sy / float(y_diff @ y_diff)) * np.eye(nfree)
            rho = 1.0 / sy
            I = np.eye(nfree)
            A = I - rho * np.outer(s, y_diff)
            H = A @ H @ A.T + rho * np.outer(s, s)

        dll = cand["ll"] - state["ll"]
        u, state, g = cand["u"], cand, g_new
        trace.append(state["ll"])
        small = abs(dll) <= tol * (1.0 + abs(state["ll"]))
        if small:
            gnorm = float(np.max(np.abs(g))) if nfree else 0.0
            if last_small or gnorm <= 1e-3 * (1.0 + abs(state["ll"])):
                converged = True
                break
        last_small = small

    return state, np.asarray(trace), converged, it


def default_init(y, design: DesignSet) -> KernelParams:
    """Data-driven starting point for the hyperparameter search.

    beta comes from OLS; half the OLS residual variance seeds sigma2 and
    its square root seeds the three amplitudes; the squared age range and
    a quarter of the squared cohort range seed the length scales.
    """
    y = _as_stacked(y, design)
    beta, *_ = np.linalg.lstsq(design.T, y, rcond=None)
    resid = y - design.T @ beta
    v0 = max(float(np.mean(resid**2)) / 2.0, 1e-10)
    amp = math.sqrt(v0)
    age_range = max(float(design.ages[-1] - design.ages[0]), 1.0)
    coh_range = max(
        float(design.cohort_index[-1] - design.cohort_index[0]), 1.0
    )
    return KernelParams(
        h1=amp,
        l1=age_range**2,
        h2=amp,
        l2=age_range**2,
        c=amp,
        s=coh_range**2 / 4.0,
        sigma2=v0,
    )


def _restart_init(base: KernelParams, run: int, seed) -> KernelParams:
    """Run 0 keeps the base values; runs 1/2 scale the length-scales by
    10 and 1/10; later runs draw log-uniform perturbations."""
    if run == 0:
        return base
    if run == 1:
        return replace(base, l1=base.l1 * 10, l2=base.l2 * 10, s=base.s * 10)
    if run == 2:
        return replace(base, l1=base.l1 / 10, l2=base.l2 / 10, s=base.s / 10)
    rng = np.random.default_rng([int(seed), run])
    f = 10.0 ** rng.uniform(-1.0, 1.0, size=3)
    g = 10.0 ** rng.uniform(-0.5, 0.5, size=3)
    return replace(
        base,
        h1=base.h1 * g[0],
        h2=base.h2 * g[1],
        c=base.c * g[2],
        l1=base.l1 * f[0],
        l2=base.l2 * f[1],
        s=base.s * f[2],
    )


def fit(
    y,
    design: DesignSet,
    init: KernelParams | None = None,
    restarts: int = 3,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 500,
    free: np.ndarray | None = None,
    beta_cov: str = "scaled",
) -> MixedFit:
    """Maximize the marginal log-likelihood and recover all effect estimates.

    Parameters
    ----------
    y : (n, m) grid or stacked (n*m,) vector of logit rates
    design : training design (horizon 0)
    init : starting hyperparameters; derived from the data when omitted
    restarts : number of optimization runs; the best final likelihood wins
    seed : seeds the deterministic perturbations of runs beyond the third
    free : optional boolean mask over [h1, l1, h2, l2, c, s, sigma2]
        restricting which log parameters the optimizer moves
    beta_cov : {"scaled", "gls"}
        "scaled" (the default) reports Var(beta) = sigma2 * (T' V^-1 T)^-1;
        "gls" drops the extra sigma2 factor, the textbook GLS covariance.

    Raises
    ------
    FactorizationError
        If every restart fails its covariance factorization.
    """
    if design.horizon != 0:
        raise ValueError("fit expects a training design (horizon 0)")
    if beta_cov not in ("scaled", "gls"):
        raise ValueError(f"beta_cov must be 'scaled' or 'gls', got {beta_cov!r}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    y = _as_stacked(y, design)
    base = init if init is not None else default_init(y, design)
    free = np.ones(7, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    if free.shape != (7,):
        raise ValueError("free mask must have 7 entries")

    objective = _ProfileObjective(y, design, free)
    best = None
    failures = []
    for run in range(restarts):
        u0 = np.log(_restart_init(base, run, seed).as_array())
        try:
            state, trace, converged, iters = _bfgs_ascent(
                objective, u0, free, tol, max_iter
            )
        except (FactorizationError, ValueError) as exc:
            failures.append(f"run {run}: {exc}")
            continue
        if best is None or state["ll"] > best[0]["ll"]:
            best = (state, trace, converged, iters)
    if best is None:
        raise FactorizationError(
            "all restarts failed: " + "; ".join(failures)
        )

    state, trace, converged, iters = best
    params = state["params"]
    fixed, random = _posterior(y, params, design, beta_cov)
    boundary = params.sigma2 < 1e-10 * (1.0 + float(np.var(y)))
    return MixedFit(
        params=params,
        fixed=fixed,
        random=random,
        loglik=float(state["ll"]),
        loglik_trace=trace,
        design=design,
        converged=converged,
        n_iter=iters,
        sigma2_boundary=bool(boundary),
        y=y,
        beta_cov_policy=beta_cov,
    )


def _posterior(y, params, design, beta_cov_policy):
    """Fixed-effects estimate plus the three conditional (BLUP) distributions."""
    cho, _, (K1, K2, K3) = _factor_V(params, design)
    beta, a, G, _ = _gls_from_cho(y, design.T, cho)
    Ginv = np.linalg.inv(G)
    cov_beta = params.sigma2 * Ginv if beta_cov_policy == "scaled" else Ginv

    def conditional(Z, K):
        B = scipy.linalg.cho_solve(cho, Z, check_finite=False)
        gamma = K @ (Z.T @ a)
        cov = K - K @ (Z.T @ B) @ K
        return gamma, cov

    g1, c1 = conditional(design.Z1, K1)
    g2, c2 = conditional(design.Z2, K2)
    g3, c3 = conditional(design.Z3, K3)
    fixed = FixedEffects(beta=beta, cov_beta=cov_beta)
    random = RandomEffects(gamma1=g1, cov1=c1, gamma2=g2, cov2=c2, gamma3=g3, cov3=c3)
    return fixed, random


def blup(y, fit: MixedFit) -> RandomEffects:
    """Conditional means and covariances of the random effects given Y.

    Recomputed from the fitted hyperparameters; equals ``fit.random``.
    """
    y = _as_stacked(y, fit.design)
    _, random = _posterior(y, fit.params, fit.design, fit.beta_cov_policy)
    return random


def _sandwich_diag(Z, C):
    """diag(Z C Z') without forming the full product."""
    return np.einsum("ij,jk,ik->i", Z, C, Z)


def fitted_surface(fit: MixedFit) -> tuple[np.ndarray, np.ndarray]:
    """In-sample mean and per-cell variance grids (years x ages)."""
    d = fit.design
    re = fit.random
    mean = (
        d.T @ fit.fixed.beta
        + d.Z1 @ re.gamma1
        + d.Z2 @ re.gamma2
        + d.Z3 @ re.gamma3
    )
    var = (
        np.maximum(_sandwich_diag(d.T, fit.fixed.cov_beta), 0.0)
        + np.maximum(_sandwich_diag(d.Z1, re.cov1), 0.0)
        + np.maximum(_sandwich_diag(d.Z2, re.cov2), 0.0)
        + np.maximum(_sandwich_diag(d.Z3, re.cov3), 0.0)
        + fit.params.sigma2
    )
    n, m = d.n_train, d.n_ages
    return unstack_vector(mean, n, m), unstack_vector(var, n, m)


def forecast(fit: MixedFit, horizon: int, alpha: float = 0.05) -> Forecast:
    """Extend the fit h years ahead with per-cell prediction variances.

    The cohort effect is extrapolated through its cross-covariance with the
    training cohorts; the age-intercept and age-slope effects live on the
    age axis and carry over unchanged. The reported per-cell variance sums
    the four component variances plus the noise variance.
    """
    if horizon < 1:
        raise ValueError("forecast horizon must be >= 1")
    d = fit.design
    params = fit.params
    dh = build_design(d.ages, d.train_years, horizon)
    K3_star, K3_star_star = build_forecast_covariances(params, dh)

    cho, _, _ = _factor_V(params, d)
    beta, a, _, _ = _gls_from_cho(fit.y, d.T, cho)
    B3 = scipy.linalg.cho_solve(cho, d.Z3, check_finite=False)
    W3 = d.Z3.T @ B3
    gamma3_ext = K3_star @ (d.Z3.T @ a)
    cov3_ext = K3_star_star - K3_star @ W3 @ K3_star.T

    re = fit.random
    mean = (
        dh.T @ beta
        + dh.Z1 @ re.gamma1
        + dh.Z2 @ re.gamma2
        + dh.Z3 @ gamma3_ext
    )
    var = (
        np.maximum(_sandwich_diag(dh.T, fit.fixed.cov_beta), 0.0)
        + np.maximum(_sandwich_diag(dh.Z1, re.cov1), 0.0)
        + np.maximum(_sandwich_diag(dh.Z2, re.cov2), 0.0)
        + np.maximum(_sandwich_diag(dh.Z3, cov3_ext), 0.0)
        + params.sigma2
    )
    n_all = d.n_train + horizon
    m = d.n_ages
    return Forecast(
        ages=d.ages,
        years=dh.years,
        horizon=horizon,
        mean=unstack_vector(mean, n_all, m),
        variance=unstack_vector(var, n_all, m),
    )


def extended_random_effects(fit: MixedFit, horizon: int) -> RandomEffects:
    """Random effects with the cohort vector extended ``horizon`` years ahead."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    d = fit.design
    dh = build_design(d.ages, d.train_years, horizon)
    K3_star, K3_star_star = build_forecast_covariances(fit.params, dh)
    cho, _, _ = _factor_V(fit.params, d)
    _, a, _, _ = _gls_from_cho(fit.y, d.T, cho)
    B3 = scipy.linalg.cho_solve(cho, d.Z3, check_finite=False)
    W3 = d.Z3.T @ B3
    gamma3_ext = K3_star @ (d.Z3.T @ a)
    cov3_ext = K3_star_star - K3_star @ W3 @ K3_star.T
    re = fit.random
    return RandomEffects(
        gamma1=re.gamma1,
        cov1=re.cov1,
        gamma2=re.gamma2,
        cov2=re.cov2,
        gamma3=gamma3_ext,
        cov3=cov3_ext,
    )


def _sample_psd(K, rng):
    w, Q = np.linalg.eigh(K)
    w = np.clip(w, 0.0, None)
    return Q @ (np.sqrt(w) * rng.standard_normal(w.size))


def simulate(design: DesignSet, params: KernelParams, beta, rng) -> np.ndarray:
    """Draw one stacked observation vector from the generative model.

    Works on forecast-extended designs too: the cohort effect is drawn over
    the design's full cohort axis, so train/test splits of the result are
    internally consistent.
    """
    beta = np.asarray(beta, dtype=float)
    K1 = se_kernel(design.ages, design.ages, params.h1, params.l1)
    K2 = se_kernel(design.ages, design.ages, params.h2, params.l2)
    K3 = se_kernel(design.cohort_index, design.cohort_index, params.c, params.s)
    g1 = _sample_psd(K1, rng)
    g2 = _sample_psd(K2, rng)
    g3 = _sample_psd(K3, rng)
    N = design.T.shape[0]
    eps = math.sqrt(params.sigma2) * rng.standard_normal(N)
    return design.T @ beta + design.Z1 @ g1 + design.Z2 @ g2 + design.Z3 @ g3 + eps
