"""Command-line entry point: fit, forecast and backtest as reproducible runs.

Every command writes ``run_config.json`` next to its outputs; re-running
with ``--config run_config.json`` reproduces the output files byte for
byte. Machine-readable files carry round-trip float precision; the stdout
summary rounds to 4 decimals. Exit codes: 0 success, 1 usage or data
error, 2 numerical non-convergence (artifacts are still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

# BLAS threads default to the MORTCAST_THREADS cap (or 1): the fits here are
# small enough that thread handoff dominates, and fixed-order reductions keep
# repeat runs byte-identical; must happen before numpy loads
_default_threads = os.environ.get("MORTCAST_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", _default_threads)
os.environ.setdefault("OMP_NUM_THREADS", _default_threads)
os.environ.setdefault("MKL_NUM_THREADS", _default_threads)

import numpy as np

from . import artifacts
from . import cbd as cbd_mod
from . import mixed as mixed_mod
from .backtest import BacktestPlan, emit_report, run_backtest
from .data import (
    build_surface,
    inverse_logit,
    parse_table,
    split_train_test,
    window_counts,
)
from .design import assemble_V, build_covariances, build_design
from .errors import MortcastError
from .mixed import MixedFit

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NONCONVERGENCE = 2


class UsageError(MortcastError):
    """Invalid flags or inconsistent options."""


@dataclass
class RunConfig:
    """Fully serializable description of one CLI run."""

    command: str
    input: str | None = None
    format: str = "csv"
    sex: str = "total"
    ages: tuple[int, int] | None = None
    years: tuple[int, int] | None = None
    split_year: int | None = None
    model: str | None = "mixed"
    models: tuple[str, ...] = ("mixed", "cbd")
    horizon: int | None = None
    horizons: tuple[int, ...] = (5, 10, 15, 20)
    windows: int = 10
    alpha: float = 0.05
    out: str = "."
    seed: int = 0
    restarts: int = 3
    fit_path: str | None = None
    label: str = "dataset"
    clamp_q: float | None = None
    var_beta: str = "scaled"
    rw_divisor: str = "n"
    synth_exposure: float = 1e5
    dump_matrices: bool = False

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config field(s): {unknown}")
        cfg = cls(**doc)
        for name in ("ages", "years", "models", "horizons"):
            v = getattr(cfg, name)
            if isinstance(v, list):
                setattr(cfg, name, tuple(v))
        return cfg


def _parse_range(text: str, name: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise UsageError(f"--{name} expects LO:HI, got {text!r}") from None
    if hi < lo:
        raise UsageError(f"--{name} range {lo}:{hi} is reversed")
    return lo, hi


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mortcast",
        description="Fit, forecast and backtest old-age mortality models.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_data_flags(sp):
        sp.add_argument("--input", help="mortality table file")
        sp.add_argument("--format", choices=["hmd_1x1", "csv"], default="csv")
        sp.add_argument("--sex", choices=["female", "male", "total"], default="total")
        sp.add_argument("--ages", default="60:89",
                        help="inclusive age window LO:HI (default 60:89)")
        sp.add_argument("--years", help="inclusive year window LO:HI")
        sp.add_argument(
            "--clamp-q",
            nargs="?",
            const=1e-6,
            type=float,
            default=None,
            help="replace q <= 0 cells with this value instead of failing "
            "(default 1e-6 when the flag is given without a value)",
        )

    def add_common(sp):
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="re-run from a saved run_config.json")

    f = sub.add_parser("fit", help="fit one model on a training window")
    add_data_flags(f)
    f.add_argument("--model", choices=["mixed", "cbd"], default="mixed")
    f.add_argument("--split-year", type=int, default=None, dest="split_year",
                   help="train only on years up to this one (the rest of "
                   "the --years window is held out)")
    f.add_argument("--restarts", type=int, default=3)
    f.add_argument("--var-beta", choices=["scaled", "gls"], default="scaled")
    f.add_argument("--exposure", type=float, default=1e5, dest="synth_exposure",
                   help="flat exposure used to synthesize counts for the "
                   "CBD fit when the input has no deaths/exposure columns")
    f.add_argument("--dump-matrices", action="store_true",
                   help="also write the design and covariance matrices as CSV")
    add_common(f)

    fc = sub.add_parser("forecast", help="forecast from a saved fit artifact")
    fc.add_argument("--fit", dest="fit_path", help="path to fit.json")
    fc.add_argument("--model", choices=["mixed", "cbd"], default=None,
                    help="optional; must match the artifact's model tag")
    fc.add_argument("--horizon", type=int)
    fc.add_argument("--alpha", type=float, default=0.05)
    fc.add_argument("--rw-divisor", choices=["n", "n-1"], default="n")
    add_common(fc)

    b = sub.add_parser("backtest", help="rolling-window evaluation")
    add_data_flags(b)
    b.add_argument("--models", default="mixed,cbd",
                   help="comma-separated subset of mixed,cbd")
    b.add_argument("--horizons", default="5,10,15,20")
    b.add_argument("--windows", type=int, default=10)
    b.add_argument("--restarts", type=int, default=1)
    b.add_argument("--rw-divisor", choices=["n", "n-1"], default="n")
    b.add_argument("--exposure", type=float, default=1e5, dest="synth_exposure")
    b.add_argument("--label", default="dataset")
    add_common(b)
    return p


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        return RunConfig.from_json(path.read_text())
    cfg = RunConfig(command=args.command)
    simple = (
        "input format sex model split_year restarts synth_exposure "
        "dump_matrices out seed fit_path horizon alpha windows label "
        "clamp_q var_beta rw_divisor"
    ).split()
    for name in simple:
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    if getattr(args, "ages", None):
        cfg.ages = _parse_range(args.ages, "ages")
    if getattr(args, "years", None):
        cfg.years = _parse_range(args.years, "years")
    if getattr(args, "models", None):
        cfg.models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    if getattr(args, "horizons", None) and args.command == "backtest":
        try:
            cfg.horizons = tuple(int(h) for h in args.horizons.split(","))
        except ValueError:
            raise UsageError(f"--horizons expects integers, got {args.horizons!r}")
    return cfg


def _load_surface(cfg: RunConfig):
    if not cfg.input:
        raise UsageError("--input is required")
    path = Path(cfg.input)
    if not path.exists():
        raise MortcastError(f"input file not found: {path}")
    if cfg.ages is None or cfg.years is None:
        raise UsageError("--ages and --years are required")
    table = parse_table(path.read_text(), cfg.format, sex=cfg.sex)
    surface = build_surface(table, cfg.ages, cfg.years, clamp_q=cfg.clamp_q)
    counts = window_counts(table, cfg.ages, cfg.years)
    return surface, counts


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text)
    return path


def _matrix_csv(mat: np.ndarray) -> str:
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(mat)]
    return "\n".join(lines) + "\n"


def cmd_fit(cfg: RunConfig) -> int:
    surface, counts = _load_surface(cfg)
    if cfg.split_year is not None:
        surface, _ = split_train_test(surface, cfg.split_year)
        if counts is not None:
            k = surface.n_years
            counts = (counts[0][:k], counts[1][:k])
    out_dir = Path(cfg.out)
    t0 = time.perf_counter()
    if cfg.model == "mixed":
        design = build_design(surface.ages, surface.years)
        fit = mixed_mod.fit(
            surface.y,
            design,
            restarts=cfg.restarts,
            seed=cfg.seed,
            beta_cov=cfg.var_beta,
        )
        converged = fit.converged
        summary = [
            f"model: mixed ({surface.years[0]}-{surface.years[-1]}, "
            f"ages {surface.ages[0]}-{surface.ages[-1]})",
            f"log-likelihood: {fit.loglik:.4f}",
            "params: "
            + ", ".join(
                f"{name}={getattr(fit.params, name):.4g}"
                for name in fit.params.NAMES
            ),
            f"beta: [{fit.fixed.beta1:.4f}, {fit.fixed.beta2:.4f}]",
            f"converged: {converged} ({fit.n_iter} iterations)",
        ]
        if fit.sigma2_boundary:
            summary.append("warning: sigma2 at its lower boundary")
        if cfg.dump_matrices:
            K1, K2, K3 = build_covariances(fit.params, design)
            for name, mat in [
                ("T", design.T), ("Z1", design.Z1), ("Z2", design.Z2),
                ("Z3", design.Z3), ("K1", K1), ("K2", K2), ("K3", K3),
                ("V", assemble_V(fit.params, design)),
            ]:
                _write(out_dir, f"matrix_{name}.csv", _matrix_csv(mat))
    else:
        if counts is not None:
            D, E = counts
        else:
            D, E = cbd_mod.synthesize_counts(surface.q, cfg.synth_exposure)
        fit = cbd_mod.fit_cbd(D, E, surface.ages, surface.years)
        converged = fit.converged
        r1, r2 = fit.constraint_residuals
        summary = [
            f"model: cbd ({surface.years[0]}-{surface.years[-1]}, "
            f"ages {surface.ages[0]}-{surface.ages[-1]})",
            f"poisson log-likelihood: {fit.loglik:.4f}",
            f"constraint residuals: ({r1:.2e}, {r2:.2e})",
            f"converged: {converged} ({fit.n_sweeps} sweeps)",
        ]
    elapsed = time.perf_counter() - t0
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.save_fit(fit, out_dir / "fit.json")
    _write(out_dir, "run_config.json", cfg.to_json())
    print("\n".join(summary))
    print(f"fit written to {out_dir / 'fit.json'} in {elapsed:.1f}s")
    return EXIT_OK if converged else EXIT_NONCONVERGENCE


def _forecast_rows(fc, alpha):
    level = round((1.0 - alpha) * 100)
    lo, hi = fc.interval(alpha)
    n_fc = fc.horizon
    rows = []
    for i in range(fc.years.size - n_fc, fc.years.size):
        for j, age in enumerate(fc.ages):
            rows.append(
                (
                    int(fc.years[i]),
                    int(age),
                    float(fc.mean[i, j]),
                    float(inverse_logit(fc.mean[i, j])),
                    float(lo[i, j]),
                    float(hi[i, j]),
                )
            )
    return rows, level


def cmd_forecast(cfg: RunConfig) -> int:
    if not cfg.fit_path:
        raise UsageError("--fit is required")
    if cfg.horizon is None or cfg.horizon <= 0:
        raise UsageError("--horizon must be a positive integer")
    path = Path(cfg.fit_path)
    if not path.exists():
        raise MortcastError(f"fit artifact not found: {path}")
    fit = artifacts.load_fit(path)
    tag = "mixed" if isinstance(fit, MixedFit) else "cbd"
    if cfg.model is not None and cfg.model != tag:
        raise UsageError(
            f"artifact model tag {tag!r} does not match --model {cfg.model!r}"
        )
    if isinstance(fit, MixedFit):
        fc = mixed_mod.forecast(fit, cfg.horizon, cfg.alpha)
    else:
        drift = cbd_mod.estimate_rw(fit, divisor=cfg.rw_divisor)
        fc = cbd_mod.forecast_cbd(fit, drift, cfg.horizon, cfg.alpha)

    rows, level = _forecast_rows(fc, cfg.alpha)
    out_dir = Path(cfg.out)
    head = f"year,age,mean_logit,q_mean,lo{level},hi{level}\n"
    body = "".join(
        f"{t},{x},{m!r},{q!r},{lo!r},{hi!r}\n" for t, x, m, q, lo, hi in rows
    )
    _write(out_dir, "forecast.csv", head + body)
    by_age = sorted(rows, key=lambda r: (r[1], r[0]))
    plot = f"age,year,mean_logit,lo{level},hi{level}\n" + "".join(
        f"{x},{t},{m!r},{lo!r},{hi!r}\n" for t, x, m, q, lo, hi in by_age
    )
    _write(out_dir, "plot_data.csv", plot)
    _write(out_dir, "run_config.json", cfg.to_json())
    print(
        f"{tag} forecast: {fc.horizon} years x {fc.ages.size} ages "
        f"({len(rows)} rows) written to {out_dir / 'forecast.csv'}"
    )
    return EXIT_OK


def cmd_backtest(cfg: RunConfig) -> int:
    surface, counts = _load_surface(cfg)
    plan = BacktestPlan(
        label=cfg.label,
        sex=cfg.sex,
        ages=cfg.ages,
        years=cfg.years,
        horizons=tuple(cfg.horizons),
        windows=cfg.windows,
        models=tuple(cfg.models),
        seed=cfg.seed,
        restarts=cfg.restarts,
        rw_divisor=cfg.rw_divisor,
        synth_exposure=cfg.synth_exposure,
    )
    deaths, exposures = counts if counts is not None else (None, None)
    t0 = time.perf_counter()
    report = run_backtest(plan, surface, deaths, exposures)
    elapsed = time.perf_counter() - t0
    report.runtime_seconds = elapsed  # stdout only; never serialized
    out_dir = Path(cfg.out)
    _write(out_dir, "report.csv", emit_report(report, "csv"))
    _write(out_dir, "report.md", emit_report(report, "markdown-table"))
    _write(out_dir, "report.json", emit_report(report, "json"))
    _write(out_dir, "run_config.json", cfg.to_json())
    print(emit_report(report, "markdown-table"))
    if report.failures:
        print(f"WARNING: {len(report.failures)} window(s) excluded after fit failures",
              file=sys.stderr)
    print(f"backtest finished in {elapsed:.1f}s; reports in {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    try:
        cfg = _config_from_args(args)
        if cfg.command == "fit":
            return cmd_fit(cfg)
        if cfg.command == "forecast":
            return cmd_forecast(cfg)
        if cfg.command == "backtest":
            return cmd_backtest(cfg)
        raise UsageError(f"unknown command {cfg.command!r}")
    except (MortcastError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def console_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_entry()
