"""JSON fit artifacts: enough state to reproduce forecasts without refitting.

A mixed-model artifact stores the fitted hyperparameters plus the exact
training window and observations; the solver state needed for forecasting
is recomputed deterministically on load (no optimizer runs). A CBD
artifact stores the parameter curves directly. Floats serialize with
round-trip precision.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cbd import CbdFit
from .design import KernelParams, build_design
from .mixed import MixedFit, _posterior, stack_grid, unstack_vector

SCHEMA_VERSION = 1


def fit_to_dict(fit: MixedFit | CbdFit) -> dict:
    """Serializable document for either model's fit."""
    if isinstance(fit, MixedFit):
        return _mixed_to_dict(fit)
    if isinstance(fit, CbdFit):
        return _cbd_to_dict(fit)
    raise TypeError(f"unsupported fit type {type(fit).__name__}")


def _window(ages, years) -> dict:
    return {
        "ages": [int(ages[0]), int(ages[-1])],
        "years": [int(years[0]), int(years[-1])],
    }


def _mixed_to_dict(fit: MixedFit) -> dict:
    d = fit.design
    y_grid = unstack_vector(fit.y, d.n_train, d.n_ages)
    return {
        "schema_version": SCHEMA_VERSION,
        "model": "mixed",
        "window": _window(d.ages, d.train_years),
        "params": {name: getattr(fit.params, name) for name in KernelParams.NAMES},
        "beta": fit.fixed.beta.tolist(),
        "cov_beta": fit.fixed.cov_beta.tolist(),
        "beta_cov_policy": fit.beta_cov_policy,
        "gamma1": fit.random.gamma1.tolist(),
        "var_gamma1": np.diag(fit.random.cov1).tolist(),
        "gamma2": fit.random.gamma2.tolist(),
        "var_gamma2": np.diag(fit.random.cov2).tolist(),
        "gamma3": fit.random.gamma3.tolist(),
        "var_gamma3": np.diag(fit.random.cov3).tolist(),
        "loglik": fit.loglik,
        "loglik_trace": fit.loglik_trace.tolist(),
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "sigma2_boundary": fit.sigma2_boundary,
        "y": y_grid.tolist(),
    }


def _cbd_to_dict(fit: CbdFit) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model": "cbd",
        "window": _window(fit.ages, fit.years),
        "kappa1": fit.kappa1.tolist(),
        "kappa2": fit.kappa2.tolist(),
        "gamma3": fit.gamma3.tolist(),
        "included": fit.included.astype(int).tolist(),
        "x_bar": fit.x_bar,
        "loglik": fit.loglik,
        "loglik_trace": fit.loglik_trace.tolist(),
        "constraint_residuals": list(fit.constraint_residuals),
        "converged": fit.converged,
        "n_sweeps": fit.n_sweeps,
    }


def dict_to_fit(doc: dict) -> MixedFit | CbdFit:
    """Rebuild a fit object from its artifact document."""
    model = doc.get("model")
    if model == "mixed":
        return _dict_to_mixed(doc)
    if model == "cbd":
        return _dict_to_cbd(doc)
    raise ValueError(f"unknown or missing model tag {model!r}")


def _axis_from_window(pair) -> np.ndarray:
    return np.arange(int(pair[0]), int(pair[1]) + 1)


def _dict_to_mixed(doc: dict) -> MixedFit:
    ages = _axis_from_window(doc["window"]["ages"])
    years = _axis_from_window(doc["window"]["years"])
    design = build_design(ages, years)
    params = KernelParams(**doc["params"])
    y = stack_grid(np.asarray(doc["y"], dtype=float))
    policy = doc.get("beta_cov_policy", "scaled")
    fixed, random = _posterior(y, params, design, policy)
    return MixedFit(
        params=params,
        fixed=fixed,
        random=random,
        loglik=float(doc["loglik"]),
        loglik_trace=np.asarray(doc["loglik_trace"], dtype=float),
        design=design,
        converged=bool(doc["converged"]),
        n_iter=int(doc["n_iter"]),
        sigma2_boundary=bool(doc["sigma2_boundary"]),
        y=y,
        beta_cov_policy=policy,
    )


def _dict_to_cbd(doc: dict) -> CbdFit:
    ages = _axis_from_window(doc["window"]["ages"])
    years = _axis_from_window(doc["window"]["years"])
    cohorts = np.arange(years[0] - ages[-1], years[-1] - ages[0] + 1)
    return CbdFit(
        ages=ages,
        years=years,
        kappa1=np.asarray(doc["kappa1"], dtype=float),
        kappa2=np.asarray(doc["kappa2"], dtype=float),
        gamma3=np.asarray(doc["gamma3"], dtype=float),
        cohorts=cohorts,
        included=np.asarray(doc["included"], dtype=bool),
        x_bar=float(doc["x_bar"]),
        loglik=float(doc["loglik"]),
        loglik_trace=np.asarray(doc["loglik_trace"], dtype=float),
        constraint_residuals=tuple(doc["constraint_residuals"]),
        converged=bool(doc["converged"]),
        n_sweeps=int(doc["n_sweeps"]),
    )


def save_fit(fit: MixedFit | CbdFit, path) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=2, sort_keys=True) + "\n")


def load_fit(path) -> MixedFit | CbdFit:
    return dict_to_fit(json.loads(Path(path).read_text()))
