"""Command-line entry point.

Subcommands: ``synth`` (generate oracle panels), ``fit`` (train and
serialize model fits), ``forecast`` (one origin to quantile files),
``backtest`` (full rolling study), ``score`` (score existing forecast files
against realized data) and ``calibration`` (emit calibration-curve data).
All settings come from an INI config file (see ``--write-config-template``);
command-line flags override config values.  Failures print a
machine-readable JSON error to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from .exceptions import EsnCastError
from .forecast import advance_fits, fit_models, load_model_fit, save_model_fit, simulate_paths
from .panel import PanelSchema, load_panel, save_panel
from .pipeline import (
    BacktestConfig,
    config_from_ini,
    run_backtest,
    write_config_template,
    write_outputs,
)
from .reservoir import ReservoirConfig
from .scoring import (
    CalibrationCurves,
    ScoreReport,
    quantile_score,
    upper_tail_loss,
)
from .synthetic import SynthSpec, generate, make_demand_quantile_columns

log = logging.getLogger("esncast")


def _add_common(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--quiet", action="store_true", help="suppress progress logs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esncast",
        description="Probabilistic forecasting with ensembles of echo state "
                    "networks and marginally calibrated copula models.",
    )
    parser.add_argument(
        "--write-config-template", metavar="PATH",
        help="write a commented configuration template and exit",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic panel file")
    _add_common(p)
    p.add_argument("--out", required=True, help="output panel CSV")
    p.add_argument("--family", default="gaussian_esn",
                   choices=("gaussian_esn", "skew_t_esn", "copula_esn",
                            "gaussian_var"))
    p.add_argument("--length", type=int, default=4000,
                   help="recorded panel rows")
    p.add_argument("--n-series", type=int, default=2)
    p.add_argument("--n-h", type=int, default=30)
    p.add_argument("--short-lags", default="1,2,3,4",
                   help="comma-separated lags")
    p.add_argument("--long-lags", default="8,12", help="comma-separated lags")
    p.add_argument("--demand-noise", type=float, default=None,
                   help="attach synthetic D10/D50/D90 with this noise scale")
    p.add_argument("--truth-out", help="optional JSON file of true parameters")

    p = sub.add_parser("fit", help="fit models on the last training window")
    _add_common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-end", type=int, default=None,
                   help="row index ending the training window (default: end)")

    p = sub.add_parser("forecast", help="simulate one forecast origin")
    _add_common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--fits-dir", required=True)
    p.add_argument("--origin", required=True,
                   help="row index or ISO timestamp of the forecast origin")
    p.add_argument("--out", required=True, help="output quantile CSV")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--n-path", type=int, default=None)

    p = sub.add_parser("backtest", help="run a rolling fit/forecast/score study")
    _add_common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--audit", action="store_true",
                   help="enable the no-look-ahead provenance audit")
    p.add_argument("--save-fits", metavar="DIR",
                   help="serialize per-window model fits")
    p.add_argument("--fits-dir", metavar="DIR",
                   help="load per-window model fits instead of refitting")

    p = sub.add_parser("score", help="score stored forecasts against realizations")
    _add_common(p)
    p.add_argument("--forecasts", required=True,
                   help="forecast_quantiles.csv from a backtest or forecast run")
    p.add_argument("--panel", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("calibration",
                       help="emit calibration curves for stored forecasts")
    _add_common(p)
    p.add_argument("--forecasts", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=257)
    return parser


def _config(args) -> BacktestConfig:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    if args.config:
        return config_from_ini(args.config, overrides)
    return BacktestConfig(**overrides) if overrides else BacktestConfig()


def _load_panel_for(config: BacktestConfig, path):
    return load_panel(path, PanelSchema(exogenous=tuple(config.exogenous)))


def _cmd_synth(args) -> int:
    from .forecast import FeatureSpec

    short = tuple(int(s) for s in args.short_lags.split(","))
    long_ = tuple(int(s) for s in args.long_lags.split(",") if s.strip())
    sids = tuple(f"S{i + 1}" for i in range(args.n_series))
    fs = FeatureSpec(series_ids=sids, short_lags=short, long_lags=long_)
    spec = SynthSpec(
        family=args.family, T=args.length, feature_spec=fs,
        reservoir=ReservoirConfig(n_h=args.n_h, seed=args.seed or 0),
        seed=args.seed or 0,
    )
    panel, truth = generate(spec)
    if args.demand_noise is not None:
        cols, _ = make_demand_quantile_columns(panel, args.demand_noise,
                                               seed=spec.seed)
        panel = panel.with_exogenous(cols)
    save_panel(panel, args.out)
    log.info("wrote %s (%d rows x %d series)", args.out, panel.T,
             len(panel.series_ids))
    if args.truth_out:
        payload = {
            "family": truth.family,
            "sigma2": truth.sigma2,
            "psi": truth.psi,
            "nu": truth.nu,
            "tau2": truth.tau2,
            "level": truth.level,
            "beta": {k: v.tolist() for k, v in truth.beta.items()},
        }
        with open(args.truth_out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_fit(args) -> int:
    config = _config(args)
    panel = _load_panel_for(config, args.panel)
    t1 = args.train_end if args.train_end is not None else panel.T
    t0 = t1 - config.train_window
    series = tuple(config.series) if config.series else panel.series_ids
    os.makedirs(args.out_dir, exist_ok=True)
    for family in config.families:
        spec = config.feature_spec(family, series)
        fits = fit_models(
            panel, family, spec, config.reservoir_config(),
            train_range=(t0, t1), K=config.K, n_iter=config.mcmc_iter,
            n_burn=config.mcmc_burn, seed=config.seed,
        )
        for sid, fit in fits.items():
            path = os.path.join(args.out_dir, f"{family}_{sid}.npz")
            save_model_fit(fit, path)
            log.info("wrote %s", path)
    return 0


def _cmd_forecast(args) -> int:
    config = _config(args)
    panel = _load_panel_for(config, args.panel)
    try:
        origin = int(args.origin)
    except ValueError:
        origin = panel.index_of(args.origin)
    horizon = args.horizon or config.horizon
    n_path = args.n_path or config.n_path
    rows = []
    for family in config.families:
        fits = {}
        for name in sorted(os.listdir(args.fits_dir)):
            if name.startswith(f"{family}_") and name.endswith(".npz"):
                fit = load_model_fit(os.path.join(args.fits_dir, name))
                fits[fit.series_id] = fit
        if not fits:
            continue
        fits = advance_fits(fits, panel, origin)
        ens = simulate_paths(
            fits, panel, origin, horizon, n_path, seed=config.seed,
            quantile_levels=tuple(config.quantile_levels),
        )
        rows.extend((family,) + r for r in ens.to_rows())
    if not rows:
        raise EsnCastError(f"no model fits found in {args.fits_dir}")
    pd.DataFrame(
        rows, columns=["model", "origin", "step", "series", "level", "value"]
    ).to_csv(args.out, index=False)
    log.info("wrote %s", args.out)
    return 0


def _cmd_backtest(args) -> int:
    config = _config(args)
    panel = _load_panel_for(config, args.panel)
    result = run_backtest(
        panel, config, out_dir=args.out_dir, audit=args.audit,
        fits_dir=args.fits_dir, save_fits_dir=args.save_fits,
    )
    log.info(
        "backtest complete: %d origins, outputs in %s",
        result.manifest["n_origins"], args.out_dir,
    )
    return 0


def _realized_lookup(panel, archive):
    """Realized value for each (origin, step, series) present in a file."""
    origin_idx = {}
    for ts in archive.origin.unique():
        origin_idx[ts] = panel.index_of(np.datetime64(ts))
    return origin_idx


def _cmd_score(args) -> int:
    config = _config(args)
    panel = _load_panel_for(config, args.panel)
    archive = pd.read_csv(args.forecasts)
    origin_idx = _realized_lookup(panel, archive)
    report = ScoreReport()
    grouped = archive.groupby(["model", "origin", "step", "series"], sort=True)
    rows: dict[tuple, dict[str, list]] = {}
    for (model, origin, step, series), grp in grouped:
        t = origin_idx[origin] + int(step)
        if t >= panel.T:
            continue
        y = float(panel.values[t, panel.series_index(series)])
        levels = {}
        mean = None
        for _, row in grp.iterrows():
            if row.level == "mean":
                mean = float(row.value)
            else:
                levels[float(row.level)] = float(row.value)
        store = rows.setdefault((model, series, int(step)), {
            "mae": [], "rmse": [], "crps": [], "qs05": [], "qs95": [],
            "js": [], "c95": [],
        })
        if mean is not None:
            store["mae"].append(abs(mean - y))
            store["rmse"].append((mean - y) ** 2)
        lv = sorted(levels)
        qs = np.array([levels[a] for a in lv])
        al = np.array(lv)
        store["crps"].append(
            float(np.trapezoid(2.0 * ((y < qs) - al) * (qs - y), al))
        )
        if 0.05 in levels:
            store["qs05"].append(quantile_score(levels[0.05], y, 0.05))
        if 0.95 in levels:
            store["qs95"].append(quantile_score(levels[0.95], y, 0.95))
        if 0.975 in levels:
            upper_levels = [a for a in lv if a >= 0.975]
            el = float(np.mean([levels[a] for a in upper_levels]))
            store["js"].append(upper_tail_loss(levels[0.975], el, y))
        if 0.025 in levels and 0.975 in levels:
            store["c95"].append(float(levels[0.025] <= y <= levels[0.975]))
    for (model, series, step), store in sorted(rows.items()):
        for metric, values in store.items():
            if not values:
                continue
            arr = np.asarray(values)
            agg = np.sqrt(arr.mean()) if metric == "rmse" else arr.mean()
            report.add(model, series, step, metric, float(agg))
    os.makedirs(args.out_dir, exist_ok=True)
    report.to_csv(os.path.join(args.out_dir, "scores.csv"))
    with open(os.path.join(args.out_dir, "scores.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_text())
        fh.write("\n")
    log.info("wrote scores to %s", args.out_dir)
    return 0


def _cmd_calibration(args) -> int:
    config = _config(args)
    panel = _load_panel_for(config, args.panel)
    archive = pd.read_csv(args.forecasts)
    archive = archive[archive.level != "mean"].copy()
    archive["level"] = archive.level.astype(float)
    origin_idx = _realized_lookup(panel, archive)
    out_rows = []
    for (model, series), grp in archive.groupby(["model", "series"], sort=True):
        lo = panel.lower_y
        hi = max(u for _, u in panel.upper_y_schedule)
        grid = np.linspace(lo, hi, args.grid_size)
        fbar = np.zeros(args.grid_size)
        hhat = np.zeros(args.grid_size)
        count = 0
        for (origin, step), case in grp.groupby(["origin", "step"], sort=True):
            t = origin_idx[origin] + int(step)
            if t >= panel.T:
                continue
            y = float(panel.values[t, panel.series_index(series)])
            qs = case.sort_values("level")
            # interpolate level as a function of value = predictive CDF
            fbar += np.interp(grid, qs.value.to_numpy(), qs.level.to_numpy(),
                              left=0.0, right=1.0)
            hhat += (y <= grid).astype(float)
            count += 1
        if count == 0:
            continue
        curves = CalibrationCurves(y_grid=grid, h_hat=hhat / count,
                                   f_bar=fbar / count)
        for yv, h, f in zip(curves.y_grid, curves.h_hat, curves.f_bar):
            out_rows.append((model, series, float(yv), float(h), float(f)))
    pd.DataFrame(
        out_rows,
        columns=["model", "series", "y", "empirical_cdf",
                 "mean_predictive_cdf"],
    ).to_csv(args.out, index=False)
    log.info("wrote %s", args.out)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "forecast": _cmd_forecast,
    "backtest": _cmd_backtest,
    "score": _cmd_score,
    "calibration": _cmd_calibration,
}


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.write_config_template:
        write_config_template(args.write_config_template)
        print(f"wrote {args.write_config_template}")
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s", datefmt="%H:%M:%S",
    )
    try:
        return _COMMANDS[args.command](args)
    except EsnCastError as exc:
        json.dump(
            {"error": type(exc).__name__, "message": str(exc)},
            sys.stderr,
        )
        sys.stderr.write("\n")
        return 1


def main() -> None:
    raise SystemExit(cli_dispatch())


if __name__ == "__main__":
    main()
