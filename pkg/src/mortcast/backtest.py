"""Rolling-window out-of-sample evaluation of both models.

For horizon h and window w the models train on all years up to
t_l + w (with t_l chosen so the ten targets end exactly at the last data
year), forecast h years ahead, and are scored on the target year's curve.
The headline number pools squared errors over all windows and ages before
taking the root; it is not a mean of per-window RMSEs.
"""

from __future__ import annotations

import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import cbd as cbd_mod
from . import mixed as mixed_mod
from .data import MortalitySurface
from .design import build_design

MODELS = ("mixed", "cbd")


def rmse_curve(pred, actual) -> float:
    """Root mean squared logit-scale error across one year's age curve."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.ndim != 1:
        raise ValueError(
            f"age axes do not match: {pred.shape} vs {actual.shape}"
        )
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


@dataclass(frozen=True)
class BacktestPlan:
    """What to backtest and with which policy knobs.

    ``ages``/``years`` are optional (lo, hi) windows; when set they must
    match the surface handed to :func:`run_backtest`.
    """

    label: str = "dataset"
    sex: str = "total"
    ages: tuple[int, int] | None = (60, 89)
    years: tuple[int, int] | None = None
    horizons: tuple[int, ...] = (5, 10, 15, 20)
    windows: int = 10
    models: tuple[str, ...] = MODELS
    seed: int = 0
    restarts: int = 1
    rw_divisor: str = "n"
    synth_exposure: float = 1e5
    workers: int | None = None

    def __post_init__(self):
        if self.windows < 1:
            raise ValueError("windows must be >= 1")
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ValueError("horizons must be positive")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ValueError(f"unknown model(s) {bad}; choose from {MODELS}")

    def check_surface(self, surface: MortalitySurface) -> None:
        for name, window, axis in (
            ("ages", self.ages, surface.ages),
            ("years", self.years, surface.years),
        ):
            if window is not None and (
                int(axis[0]) != window[0] or int(axis[-1]) != window[1]
            ):
                raise ValueError(
                    f"plan {name} {window[0]}:{window[1]} do not match the "
                    f"surface ({int(axis[0])}:{int(axis[-1])})"
                )


@dataclass(frozen=True)
class WindowResult:
    model: str
    horizon: int
    window: int
    train_end: int
    target_year: int
    rmse: float
    errors: np.ndarray | None
    failed: bool = False
    message: str = ""


@dataclass
class BacktestReport:
    plan: BacktestPlan
    ages: np.ndarray
    years: np.ndarray
    results: list[WindowResult]
    pooled: dict[tuple[str, int], float]
    failures: list[str] = field(default_factory=list)
    runtime_seconds: float | None = None  # stdout-only; never serialized

    def pooled_rmse(self, model: str, horizon: int) -> float:
        return self.pooled[(model, horizon)]


def _window_seed(plan_seed: int, model: str, horizon: int, window: int) -> int:
    ss = np.random.SeedSequence(
        entropy=plan_seed, spawn_key=(MODELS.index(model), horizon, window)
    )
    return int(ss.generate_state(1)[0])


def _run_window(surface, deaths, exposures, plan, model, horizon, window, t_l):
    train_end = t_l + window
    target_year = train_end + horizon
    k = int(train_end - surface.years[0]) + 1
    train_years = surface.years[:k]
    actual = surface.y[int(target_year - surface.years[0])]
    try:
        if model == "mixed":
            design = build_design(surface.ages, train_years)
            fit = mixed_mod.fit(
                surface.y[:k],
                design,
                restarts=plan.restarts,
                seed=_window_seed(plan.seed, model, horizon, window),
            )
            fc = mixed_mod.forecast(fit, horizon)
        else:
            if deaths is not None and exposures is not None:
                Dw, Ew = deaths[:k], exposures[:k]
            else:
                Dw, Ew = cbd_mod.synthesize_counts(
                    surface.q[:k], plan.synth_exposure
                )
            fit = cbd_mod.fit_cbd(Dw, Ew, surface.ages, train_years)
            drift = cbd_mod.estimate_rw(fit, divisor=plan.rw_divisor)
            fc = cbd_mod.forecast_cbd(fit, drift, horizon)
        pred, _ = fc.year_slice(int(target_year))
    except Exception as exc:  # fit failures are reported, not fatal
        return WindowResult(
            model=model,
            horizon=horizon,
            window=window,
            train_end=int(train_end),
            target_year=int(target_year),
            rmse=float("nan"),
            errors=None,
            failed=True,
            message=f"{type(exc).__name__}: {exc}",
        )
    errors = pred - actual
    return WindowResult(
        model=model,
        horizon=horizon,
        window=window,
        train_end=int(train_end),
        target_year=int(target_year),
        rmse=rmse_curve(pred, actual),
        errors=errors,
    )


def _resolve_workers(plan: BacktestPlan, n_tasks: int) -> int:
    cap = os.environ.get("MORTCAST_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    want = plan.workers if plan.workers is not None else min(n_tasks, cap)
    return max(1, min(want, cap, n_tasks))


def feasibility_start(years: np.ndarray, horizon: int, windows: int) -> int:
    """First training end-year t_l for a horizon, and its feasibility check.

    Targets run t_l + h .. t_l + windows - 1 + h and must end at the last
    data year, so t_l = years[-1] - horizon - (windows - 1). At least three
    training years are required for the first window.
    """
    t_l = int(years[-1]) - horizon - (windows - 1)
    min_train = 3
    if t_l - int(years[0]) + 1 < min_train:
        raise ValueError(
            f"infeasible plan at horizon {horizon}: first training window "
            f"would end in {t_l}, violating "
            f"{t_l} - {int(years[0])} + 1 >= {min_train} training years"
        )
    return t_l


def run_backtest(
    plan: BacktestPlan,
    surface: MortalitySurface,
    deaths: np.ndarray | None = None,
    exposures: np.ndarray | None = None,
) -> BacktestReport:
    """Fit-and-score every (model, horizon, window) combination.

    Windows are independent tasks and run in parallel when more than one
    worker is available (``MORTCAST_THREADS`` caps the count); results are
    merged by key, so the report does not depend on scheduling. Windows
    whose fit fails are excluded from the pooled average and listed in
    ``report.failures``.
    """
    plan.check_surface(surface)
    if (deaths is None) != (exposures is None):
        raise ValueError("provide deaths and exposures together or not at all")
    if deaths is not None and deaths.shape != surface.q.shape:
        raise ValueError("deaths/exposures grids must match the surface")

    starts = {h: feasibility_start(surface.years, h, plan.windows) for h in plan.horizons}
    tasks = [
        (model, h, w, starts[h])
        for model in plan.models
        for h in plan.horizons
        for w in range(plan.windows)
    ]
    workers = _resolve_workers(plan, len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    _run_window_star,
                    [(surface, deaths, exposures, plan, *t) for t in tasks],
                )
            )
    else:
        results = [_run_window(surface, deaths, exposures, plan, *t) for t in tasks]

    results.sort(key=lambda r: (r.model, r.horizon, r.window))
    pooled: dict[tuple[str, int], float] = {}
    failures = []
    for model in plan.models:
        for h in plan.horizons:
            errs = [
                r.errors
                for r in results
                if r.model == model and r.horizon == h and not r.failed
            ]
            for r in results:
                if r.model == model and r.horizon == h and r.failed:
                    failures.append(
                        f"{model} h={h} window={r.window} "
                        f"(train to {r.train_end}): {r.message}"
                    )
            if errs:
                stacked = np.concatenate(errs)
                pooled[(model, h)] = float(np.sqrt(np.mean(stacked**2)))
            else:
                pooled[(model, h)] = float("nan")
    return BacktestReport(
        plan=plan,
        ages=surface.ages,
        years=surface.years,
        results=results,
        pooled=pooled,
        failures=failures,
    )


def _run_window_star(args):
    return _run_window(*args)


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(report: BacktestReport, fmt: str) -> str:
    """Render a report as ``csv``, ``json`` or ``markdown-table`` text.

    Ordering is deterministic: rows sort by (model, horizon, window) with
    pooled rows (window "all") closing each horizon block.
    """
    if fmt == "csv":
        return _emit_csv(report)
    if fmt == "json":
        return _emit_json(report)
    if fmt == "markdown-table":
        return _emit_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _emit_csv(report: BacktestReport) -> str:
    out = io.StringIO()
    out.write("model,country,sex,horizon,window,rmse\n")
    plan = report.plan
    for model in sorted(plan.models):
        for h in sorted(plan.horizons):
            for r in report.results:
                if r.model == model and r.horizon == h:
                    out.write(
                        f"{model},{plan.label},{plan.sex},{h},{r.window},"
                        f"{_fmt(r.rmse)}\n"
                    )
            out.write(
                f"{model},{plan.label},{plan.sex},{h},all,"
                f"{_fmt(report.pooled[(model, h)])}\n"
            )
    return out.getvalue()


def _emit_json(report: BacktestReport) -> str:
    import json

    plan = report.plan
    doc = {
        "plan": {
            "label": plan.label,
            "sex": plan.sex,
            "horizons": list(plan.horizons),
            "windows": plan.windows,
            "models": list(plan.models),
            "seed": plan.seed,
            "restarts": plan.restarts,
            "rw_divisor": plan.rw_divisor,
            "synth_exposure": plan.synth_exposure,
        },
        "ages": [int(report.ages[0]), int(report.ages[-1])],
        "years": [int(report.years[0]), int(report.years[-1])],
        "results": [
            {
                "model": r.model,
                "horizon": r.horizon,
                "window": r.window,
                "train_end": r.train_end,
                "target_year": r.target_year,
                "rmse": None if r.failed else r.rmse,
                "failed": r.failed,
                "message": r.message,
            }
            for r in report.results
        ],
        "pooled": [
            {"model": model, "horizon": h, "rmse": report.pooled[(model, h)]}
            for model in sorted(report.plan.models)
            for h in sorted(report.plan.horizons)
        ],
        "failures": report.failures,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _emit_markdown(report: BacktestReport) -> str:
    """Pooled RMSE table, one row per horizon, one column per model;
    row minima are bolded."""
    plan = report.plan
    models = sorted(plan.models)
    out = io.StringIO()
    out.write(f"Pooled rolling-window RMSE: {plan.label} ({plan.sex})\n\n")
    out.write("| horizon | " + " | ".join(models) + " |\n")
    out.write("|---" * (len(models) + 1) + "|\n")
    for h in sorted(plan.horizons):
        vals = {m: report.pooled[(m, h)] for m in models}
        finite = {m: v for m, v in vals.items() if np.isfinite(v)}
        best = min(finite, key=finite.get) if finite else None
        cells = []
        for m in models:
            txt = f"{vals[m]:.4f}" if np.isfinite(vals[m]) else "failed"
            cells.append(f"**{txt}**" if m == best else txt)
        out.write(f"| {h} | " + " | ".join(cells) + " |\n")
    if report.failures:
        out.write("\nExcluded windows:\n")
        for f in report.failures:
            out.write(f"- {f}\n")
    return out.getvalue()
