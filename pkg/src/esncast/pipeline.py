"""Rolling-window backtests: fit, forecast, score, emit reports.

The orchestration mirrors a production study: models are refit on a moving
training window at a fixed cadence, forecast origins advance inside each
window, simulated ensembles are scored against realizations at every
horizon step, and everything lands in plain files (quantile archive, score
table, calibration curves, run manifest) keyed by a config hash so reruns
are byte-reproducible.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import __version__ as _pkg_version
from .exceptions import ConfigError, LookaheadError
from .forecast import (
    DEFAULT_LONG_LAGS,
    DEFAULT_QUANTILE_LEVELS,
    DEFAULT_SHORT_LAGS,
    FAMILIES,
    FeatureSpec,
    ForecastEnsemble,
    advance_fits,
    fit_models,
    load_model_fit,
    save_model_fit,
    simulate_paths,
)
from .margins import inverse_transform_price
from .panel import TimeSeriesPanel
from .reservoir import ReservoirConfig, derive_seed
from .scoring import (
    DEFAULT_SYSTEM_WEIGHTS,
    CalibrationCurves,
    ScoreReport,
    crps,
    ensemble_cdf_on_grid,
    quantile_score,
    upper_tail_loss,
)

__all__ = ["BacktestConfig", "BacktestResult", "run_backtest",
           "config_from_ini", "config_to_ini", "write_config_template"]

log = logging.getLogger(__name__)

ALL_METRICS = ("mae", "rmse", "crps", "qs05", "qs95", "js", "c95")


@dataclass(frozen=True)
class BacktestConfig:
    """Everything a backtest run depends on, in one hashable record.

    Windows and cadences are expressed in panel steps (half-hours at the
    default spacing); ``calendar_refits`` switches refit boundaries to
    calendar-month starts instead of a fixed step cadence.
    ``train_window_end_offset`` shifts the training-slice end past the
    refit boundary and exists only so the provenance audit has a
    deliberately corrupt configuration to catch; leave it at zero.
    """

    families: tuple[str, ...] = ("copula",)
    series: tuple[str, ...] | None = None
    short_lags: tuple[int, ...] = DEFAULT_SHORT_LAGS
    long_lags: tuple[int, ...] = DEFAULT_LONG_LAGS
    exogenous: tuple[str, ...] = ()
    include_intercept: bool = True
    n_h: int = 120
    delta: float = 0.35
    kappa: float = 1.0
    a_v: float = 0.1
    a_u: float = 0.1
    pi_v: float = 0.1
    pi_u: float = 0.1
    K: int = 100
    n_path: int = 2000
    horizon: int = 48
    train_window: int = 4320
    refit_cadence: int = 1440
    origin_cadence: int = 1
    n_origins: int | None = None
    eval_start: int | None = None
    calendar_refits: bool = False
    mcmc_iter: int = 10_000
    mcmc_burn: int = 2_000
    seed: int = 0
    quantile_levels: tuple[float, ...] = DEFAULT_QUANTILE_LEVELS
    system_weights: tuple[tuple[str, float], ...] | None = None
    score_scale: str = "log"
    metrics: tuple[str, ...] = ALL_METRICS
    store_paths: bool = False
    shared_config_index: bool = False
    train_window_end_offset: int = 0

    def __post_init__(self):
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown families: {sorted(unknown)}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        max_lag = max(tuple(self.short_lags) + tuple(self.long_lags))
        if self.train_window <= max_lag:
            raise ConfigError(
                f"train_window {self.train_window} must exceed the maximum "
                f"lag {max_lag}"
            )
        if self.score_scale not in ("log", "nominal"):
            raise ConfigError("score_scale must be 'log' or 'nominal'")
        bad = set(self.metrics) - set(ALL_METRICS)
        if bad:
            raise ConfigError(f"unknown metrics: {sorted(bad)}")
        needed = {0.025, 0.05, 0.95, 0.975}
        if not needed <= set(self.quantile_levels):
            raise ConfigError(
                "quantile_levels must include 0.025, 0.05, 0.95 and 0.975"
            )

    @property
    def max_lag(self) -> int:
        return max(tuple(self.short_lags) + tuple(self.long_lags))

    def reservoir_config(self) -> ReservoirConfig:
        return ReservoirConfig(
            n_h=self.n_h, delta=self.delta, kappa=self.kappa,
            a_v=self.a_v, a_u=self.a_u, pi_v=self.pi_v, pi_u=self.pi_u,
            seed=self.seed,
        )

    def feature_spec(self, family: str, series: tuple[str, ...]) -> FeatureSpec:
        return FeatureSpec(
            series_ids=series,
            short_lags=tuple(self.short_lags),
            long_lags=tuple(self.long_lags),
            exogenous=tuple(self.exogenous),
            include_intercept=self.include_intercept,
            value_scale="normal_score" if family == "copula" else "raw_y",
        )

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=list)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass(eq=False)
class BacktestResult:
    report: ScoreReport
    calibration: dict[tuple[str, str], CalibrationCurves]
    losses: dict[tuple[str, str, int, str], np.ndarray]
    archive: pd.DataFrame
    manifest: dict
    n_clamped: int = 0


def _refit_boundaries(panel: TimeSeriesPanel, config: BacktestConfig,
                      eval_start: int, last_origin: int) -> list[int]:
    if not config.calendar_refits:
        return list(range(eval_start, last_origin + 1, config.refit_cadence))
    months = pd.DatetimeIndex(panel.timestamps[eval_start : last_origin + 1])
    starts = [eval_start]
    periods = months.to_period("M")
    for i in range(1, len(months)):
        if periods[i] != periods[i - 1]:
            starts.append(eval_start + i)
    return starts


def _resolve_weights(config: BacktestConfig, series: tuple[str, ...]):
    if config.system_weights is not None:
        return dict(config.system_weights)
    if set(series) == set(DEFAULT_SYSTEM_WEIGHTS):
        return dict(DEFAULT_SYSTEM_WEIGHTS)
    return {sid: 1.0 / len(series) for sid in series}


def _audit_fit_window(config, t1: int, first_origin: int):
    if t1 - 1 > first_origin:
        raise LookaheadError(
            f"training slice ends at row {t1 - 1}, after the first forecast "
            f"origin {first_origin}: the configuration leaks future data"
        )


def _audit_exogenous(spec: FeatureSpec, panel: TimeSeriesPanel):
    undeclared = set(spec.exogenous) - set(panel.forward_columns)
    if undeclared:
        raise LookaheadError(
            f"exogenous columns {sorted(undeclared)} are read at target time "
            f"but not declared as forward forecasts"
        )


def run_backtest(
    panel: TimeSeriesPanel,
    config: BacktestConfig,
    out_dir=None,
    audit: bool = False,
    fits_dir=None,
    save_fits_dir=None,
) -> BacktestResult:
    """Run the rolling study and return (and optionally write) all reports.

    With ``fits_dir`` the per-window model fits are loaded from disk instead
    of re-estimated; simulation seeds depend only on the config, so a rerun
    from serialized fits reproduces the score report bitwise.
    """
    series = tuple(config.series) if config.series else panel.series_ids
    missing = set(series) - set(panel.series_ids)
    if missing:
        raise ConfigError(f"series not in panel: {sorted(missing)}")
    max_lag = config.max_lag
    eval_start = (
        config.eval_start if config.eval_start is not None
        else max_lag + config.train_window
    )
    last_origin = panel.T - config.horizon - 1
    if eval_start > last_origin:
        raise ConfigError(
            f"no usable forecast origins: eval_start {eval_start} exceeds "
            f"last scoreable origin {last_origin} "
            f"(panel has {panel.T} rows, horizon {config.horizon})"
        )
    if eval_start - config.train_window < max_lag - 1:
        raise ConfigError(
            "training window reaches into the lag warm-up region; extend the "
            "panel or reduce train_window"
        )
    origins = list(range(eval_start, last_origin + 1, config.origin_cadence))
    if config.n_origins is not None:
        origins = origins[: config.n_origins]
    boundaries = _refit_boundaries(panel, config, eval_start, origins[-1])

    weights = _resolve_weights(config, series)
    res_config = config.reservoir_config()
    levels = tuple(config.quantile_levels)
    i025, i05 = levels.index(0.025), levels.index(0.05)
    i95, i975 = levels.index(0.95), levels.index(0.975)

    report = ScoreReport()
    losses: dict[tuple[str, str, int, str], list] = {}
    calibration: dict[tuple[str, str], CalibrationCurves] = {}
    archive_rows = []
    n_clamped_total = 0

    grid_size = 257
    grids = {
        sid: np.linspace(
            panel.lower_y,
            max(u for _, u in panel.upper_y_schedule),
            grid_size,
        )
        for sid in series
    }
    if config.score_scale == "nominal":
        grids = {
            sid: inverse_transform_price(g, panel.transform)
            for sid, g in grids.items()
        }

    for family in config.families:
        spec = config.feature_spec(family, series)
        if audit and spec.exogenous:
            _audit_exogenous(spec, panel)
        fbar_sum = {sid: np.zeros(grid_size) for sid in series}
        hhat_sum = {sid: np.zeros(grid_size) for sid in series}
        case_count = {sid: 0 for sid in series}
        # per-case losses keyed (series, step, metric); rmse stores squared
        # errors so loss differentials stay additive
        fam_losses: dict[tuple[str, int, str], list] = {}

        for w, boundary in enumerate(boundaries):
            upper = (
                boundaries[w + 1] if w + 1 < len(boundaries)
                else origins[-1] + 1
            )
            window_origins = [o for o in origins if boundary <= o < upper]
            if not window_origins:
                continue
            t1 = boundary + config.train_window_end_offset
            t0 = t1 - config.train_window
            if audit:
                _audit_fit_window(config, t1, window_origins[0])
            fit_seed = derive_seed(config.seed, family, w, "fit")
            if fits_dir is not None:
                fits = {
                    sid: load_model_fit(
                        os.path.join(fits_dir, f"{family}_w{w}_{sid}.npz")
                    )
                    for sid in series
                }
            else:
                log.info("fitting %s window %d: rows [%d, %d)", family, w, t0, t1)
                fits = fit_models(
                    panel, family, spec, res_config, train_range=(t0, t1),
                    K=config.K, n_iter=config.mcmc_iter,
                    n_burn=config.mcmc_burn, seed=fit_seed,
                )
            if save_fits_dir is not None:
                os.makedirs(save_fits_dir, exist_ok=True)
                for sid, fit in fits.items():
                    save_model_fit(
                        fit, os.path.join(save_fits_dir,
                                          f"{family}_w{w}_{sid}.npz")
                    )

            for origin in window_origins:
                fits = advance_fits(fits, panel, origin)
                if audit:
                    max_trained = max(
                        rec.state_t for f in fits.values() for rec in f.records
                    )
                    if max_trained > origin:
                        raise LookaheadError(
                            f"hidden states advanced to row {max_trained}, "
                            f"after origin {origin}"
                        )
                ens = simulate_paths(
                    fits, panel, origin, config.horizon, config.n_path,
                    seed=derive_seed(config.seed, family, origin, "sim"),
                    shared_config_index=config.shared_config_index,
                    quantile_levels=levels,
                )
                n_clamped_total += ens.n_clamped
                archive_rows.extend(
                    (family,) + row for row in ens.to_rows()
                )
                realized = panel.values[
                    origin + 1 : origin + 1 + config.horizon
                ][:, [panel.series_index(s) for s in ens.series_ids]]
                paths = ens.paths
                if config.score_scale == "nominal":
                    paths = inverse_transform_price(paths, panel.transform)
                    realized = inverse_transform_price(realized, panel.transform)
                quants = np.quantile(paths, levels, axis=0)
                means = paths.mean(axis=0)

                for h in range(config.horizon):
                    for j, sid in enumerate(ens.series_ids):
                        y = float(realized[h, j])
                        sample = np.sort(paths[:, h, j])
                        vals = _case_scores(
                            config.metrics, sample, y, means[h, j],
                            quants[:, h, j], i025, i05, i95, i975,
                        )
                        for metric, value in vals.items():
                            fam_losses.setdefault(
                                (sid, h + 1, metric), []
                            ).append(value)
                        fbar_sum[sid] += ensemble_cdf_on_grid(sample, grids[sid])
                        hhat_sum[sid] += (y <= grids[sid]).astype(float)
                        case_count[sid] += 1

        for (sid, step, metric), store in sorted(fam_losses.items()):
            arr = np.asarray(store, dtype=float)
            losses[(family, sid, step, metric)] = arr
            agg = np.sqrt(arr.mean()) if metric == "rmse" else arr.mean()
            report.add(family, sid, step, metric, float(agg))
        for sid in series:
            if case_count[sid]:
                calibration[(family, sid)] = CalibrationCurves(
                    y_grid=grids[sid],
                    h_hat=hhat_sum[sid] / case_count[sid],
                    f_bar=fbar_sum[sid] / case_count[sid],
                )

    report.add_system_rows(weights)
    report.metadata.update(
        n_origins=len(origins),
        eval_start=int(eval_start),
        horizon=config.horizon,
        families=list(config.families),
        weights=weights,
        score_scale=config.score_scale,
    )
    archive = pd.DataFrame(
        archive_rows,
        columns=["model", "origin", "step", "series", "level", "value"],
    )
    manifest = {
        "config": json.loads(config.canonical_json()),
        "config_hash": config.config_hash(),
        "package_version": _pkg_version,
        "panel_fingerprint": hashlib.sha256(
            panel.values.tobytes()
        ).hexdigest()[:16],
        "n_origins": len(origins),
        "origins": [int(origins[0]), int(origins[-1])],
        "n_clamped": int(n_clamped_total),
        "audit": bool(audit),
    }
    result = BacktestResult(
        report=report, calibration=calibration, losses=losses,
        archive=archive, manifest=manifest, n_clamped=n_clamped_total,
    )
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _case_scores(metrics, sample, y, mean, quants, i025, i05, i95, i975):
    out = {}
    if "mae" in metrics:
        out["mae"] = abs(mean - y)
    if "rmse" in metrics:
        out["rmse"] = (mean - y) ** 2  # aggregated with sqrt later
    if "crps" in metrics:
        out["crps"] = crps(sample, y)
    if "qs05" in metrics:
        out["qs05"] = quantile_score(quants[i05], y, 0.05)
    if "qs95" in metrics:
        out["qs95"] = quantile_score(quants[i95], y, 0.95)
    if "js" in metrics:
        q = quants[i975]
        tail = sample[sample >= q]
        el = float(tail.mean()) if tail.size else float(q)
        out["js"] = upper_tail_loss(q, el, y)
    if "c95" in metrics:
        out["c95"] = float(quants[i025] <= y <= quants[i975])
    return out


def write_outputs(result: BacktestResult, out_dir) -> None:
    """Emit the archive, score table, calibration curves and manifest."""
    os.makedirs(out_dir, exist_ok=True)
    result.archive.to_csv(os.path.join(out_dir, "forecast_quantiles.csv"),
                          index=False)
    result.report.to_csv(os.path.join(out_dir, "scores.csv"))
    with open(os.path.join(out_dir, "scores.txt"), "w", encoding="utf-8") as fh:
        fh.write(result.report.to_text())
        fh.write("\n")
    cal_rows = []
    for (family, sid), curves in sorted(result.calibration.items()):
        for y, h, f in zip(curves.y_grid, curves.h_hat, curves.f_bar):
            cal_rows.append((family, sid, float(y), float(h), float(f)))
    pd.DataFrame(
        cal_rows, columns=["model", "series", "y", "empirical_cdf",
                           "mean_predictive_cdf"],
    ).to_csv(os.path.join(out_dir, "calibration.csv"), index=False)
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Config file round trip (flat INI with typed sections)
# ---------------------------------------------------------------------------

_SECTION_FIELDS = {
    "features": ("short_lags", "long_lags", "exogenous", "include_intercept"),
    "reservoir": ("n_h", "delta", "kappa", "a_v", "a_u", "pi_v", "pi_u", "K"),
    "mcmc": ("mcmc_iter", "mcmc_burn"),
    "backtest": (
        "families", "series", "n_path", "horizon", "train_window",
        "refit_cadence", "origin_cadence", "n_origins", "eval_start",
        "calendar_refits", "seed", "score_scale", "metrics",
        "quantile_levels", "store_paths", "shared_config_index",
        "train_window_end_offset",
    ),
}

_TEMPLATE_COMMENTS = {
    "short_lags": "lags of every series over the previous day (steps)",
    "long_lags": "same-time-of-day lags two to seven days back (steps)",
    "n_h": "hidden units per reservoir",
    "delta": "spectral scaling of the recurrent matrix, in (0, 1)",
    "kappa": "leaking rate, in (0, 1]",
    "a_v": "uniform half-width of recurrent weights",
    "pi_v": "probability a recurrent weight is nonzero",
    "K": "number of reservoir configurations in the ensemble",
    "n_path": "simulated sample paths per forecast origin",
    "horizon": "forecast horizon in steps",
    "train_window": "training window length in steps",
    "refit_cadence": "steps between model refits",
    "train_window_end_offset": "diagnostic only; nonzero leaks future data",
}


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def config_to_ini(config: BacktestConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # preserve key case (e.g. K)
    values = asdict(config)
    for section, names in _SECTION_FIELDS.items():
        parser[section] = {}
        for name in names:
            parser[section][name] = _format_value(values[name])
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def write_config_template(path) -> None:
    """Write a commented template with every default spelled out."""
    config = BacktestConfig()
    values = asdict(config)
    lines = ["# esncast backtest configuration", ""]
    for section, names in _SECTION_FIELDS.items():
        lines.append(f"[{section}]")
        for name in names:
            comment = _TEMPLATE_COMMENTS.get(name)
            if comment:
                lines.append(f"# {comment}")
            lines.append(f"{name} = {_format_value(values[name])}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def _parse_tuple(text: str, cast):
    items = [s.strip() for s in text.split(",") if s.strip()]
    return tuple(cast(s) for s in items)


_BOOL_FIELDS = {"include_intercept", "calendar_refits", "store_paths",
                "shared_config_index"}
_INT_FIELDS = {"n_h", "K", "n_path", "horizon", "train_window",
               "refit_cadence", "origin_cadence", "mcmc_iter", "mcmc_burn",
               "seed", "train_window_end_offset"}
_FLOAT_FIELDS = {"delta", "kappa", "a_v", "a_u", "pi_v", "pi_u"}
_OPT_INT_FIELDS = {"n_origins", "eval_start"}
_INT_TUPLE_FIELDS = {"short_lags", "long_lags"}
_STR_TUPLE_FIELDS = {"families", "exogenous", "metrics"}
_FLOAT_TUPLE_FIELDS = {"quantile_levels"}


def config_from_ini(path, overrides: dict | None = None) -> BacktestConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    kwargs: dict = {}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser[section].items():
            if name not in _SECTION_FIELDS[section]:
                raise ConfigError(f"unknown key {name!r} in [{section}]")
            kwargs[name] = _parse_config_value(name, raw)
    if overrides:
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return BacktestConfig(**kwargs)


def _parse_config_value(name: str, raw: str):
    raw = raw.strip()
    if name in _BOOL_FIELDS:
        return raw.lower() in ("1", "true", "yes", "on")
    if name in _INT_FIELDS:
        return int(raw)
    if name in _FLOAT_FIELDS:
        return float(raw)
    if name in _OPT_INT_FIELDS:
        return int(raw) if raw else None
    if name in _INT_TUPLE_FIELDS:
        return _parse_tuple(raw, int)
    if name in _FLOAT_TUPLE_FIELDS:
        return _parse_tuple(raw, float)
    if name in _STR_TUPLE_FIELDS:
        return _parse_tuple(raw, str)
    if name == "series":
        return _parse_tuple(raw, str) or None
    return raw
