"""Feature vectors, per-configuration fits, ensembling and path simulation.

A model for one series is an equal-weight ensemble over K random reservoir
configurations; each configuration carries its sampled weights, the
posterior-mean readout parameters and the hidden state at the last observed
row.  Multi-step forecasts are joint simulations: at every step each series
draws from its one-step predictive given features built from observed data
and previously simulated values, and the drawn value is appended to the
path's working history.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse, stats

from .bayes import (
    GaussianRidgePrior,
    PointParams,
    PosteriorDraws,
    SkewTPrior,
    gibbs_gaussian,
    gibbs_skew_t,
    marginal_error_density_skew_t,
    posterior_mean,
    sample_skew_t,
)
from .copula import (
    CopulaFit,
    WeibullTau2Prior,
    copula_predictive_density,
    copula_predictive_draw,
    mcmc_copula,
)
from .exceptions import (
    ConfigError,
    InsufficientHistoryError,
    InvalidDimensionError,
    NumericError,
)
from .margins import MarginModel, fit_bounded_kde, to_normal_scores
from .panel import TimeSeriesPanel
from .reservoir import (
    ReservoirConfig,
    ReservoirWeights,
    advance_states,
    build_design,
    derive_seed,
    run_hidden_states,
    sample_weights,
)

__all__ = [
    "FAMILIES",
    "FeatureSpec",
    "ConfigRecord",
    "ModelFit",
    "ForecastEnsemble",
    "make_features",
    "fit_models",
    "advance_fits",
    "predictive_draw_noncopula",
    "truncate_to_bounds",
    "simulate_paths",
    "ensemble_density",
    "predictive_design_rows",
    "save_model_fit",
    "load_model_fit",
]

FAMILIES = ("gaussian", "skew_normal", "skew_t", "copula")

DEFAULT_QUANTILE_LEVELS = (
    0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.975, 0.99,
)

DEFAULT_SHORT_LAGS = tuple(range(1, 49))
DEFAULT_LONG_LAGS = (96, 144, 192, 240, 288, 336)


@dataclass(frozen=True)
class FeatureSpec:
    """Layout of the input feature vector.

    Intercept first (if present), then for each series all short lags
    followed by all long lags, then the exogenous columns at the target
    time.  ``value_scale`` selects raw working-scale values or normal
    scores as the lagged inputs.
    """

    series_ids: tuple[str, ...]
    short_lags: tuple[int, ...] = DEFAULT_SHORT_LAGS
    long_lags: tuple[int, ...] = DEFAULT_LONG_LAGS
    exogenous: tuple[str, ...] = ()
    include_intercept: bool = True
    value_scale: str = "raw_y"

    def __post_init__(self):
        if not self.series_ids:
            raise ConfigError("series_ids must be nonempty")
        lags = tuple(self.short_lags) + tuple(self.long_lags)
        if not lags:
            raise ConfigError("at least one lag is required")
        if any(int(l) != l or l < 1 for l in lags):
            raise ConfigError("all lags must be positive integers")
        if len(set(lags)) != len(lags):
            raise ConfigError("duplicate lags")
        if self.value_scale not in ("raw_y", "normal_score"):
            raise ConfigError(f"unknown value_scale {self.value_scale!r}")

    @property
    def lags(self) -> tuple[int, ...]:
        return tuple(self.short_lags) + tuple(self.long_lags)

    @property
    def max_lag(self) -> int:
        return max(self.lags)

    @property
    def n_x(self) -> int:
        return (
            int(self.include_intercept)
            + len(self.series_ids) * len(self.lags)
            + len(self.exogenous)
        )


def _lag_feature_matrix(
    values: np.ndarray,
    t0: int,
    t1: int,
    spec: FeatureSpec,
    exogenous=None,
    col_of=None,
) -> np.ndarray:
    """Feature rows for targets t0..t1-1 built from a (T, S) value matrix."""
    if t0 < spec.max_lag:
        raise InsufficientHistoryError(
            f"target {t0} lies inside the {spec.max_lag}-step warm-up"
        )
    n = t1 - t0
    X = np.empty((n, spec.n_x))
    j = 0
    if spec.include_intercept:
        X[:, j] = 1.0
        j += 1
    for sid in spec.series_ids:
        col = col_of[sid] if col_of is not None else spec.series_ids.index(sid)
        for lag in spec.lags:
            X[:, j] = values[t0 - lag : t1 - lag, col]
            j += 1
    for name in spec.exogenous:
        if exogenous is None or name not in exogenous:
            raise ConfigError(f"missing exogenous column {name!r}")
        X[:, j] = np.asarray(exogenous[name])[t0:t1]
        j += 1
    return X


def _lag_feature_batch(
    work: np.ndarray,
    t_rel: int,
    spec: FeatureSpec,
    exog_row: dict,
    col_of: dict,
) -> np.ndarray:
    """Feature rows for one step across paths from a (n, W, S) working array."""
    n = work.shape[0]
    X = np.empty((n, spec.n_x))
    j = 0
    if spec.include_intercept:
        X[:, j] = 1.0
        j += 1
    for sid in spec.series_ids:
        col = col_of[sid]
        for lag in spec.lags:
            X[:, j] = work[:, t_rel - lag, col]
            j += 1
    for name in spec.exogenous:
        X[:, j] = exog_row[name]
        j += 1
    return X


def make_features(
    panel: TimeSeriesPanel,
    t: int,
    spec: FeatureSpec,
    margins: dict | None = None,
) -> np.ndarray:
    """Feature vector for target row ``t`` from observed panel data.

    For spec.value_scale == "normal_score" the per-series margins used to
    transform the lagged values must be supplied.
    """
    if t < spec.max_lag:
        raise InsufficientHistoryError(
            f"target {t} lies inside the {spec.max_lag}-step warm-up"
        )
    if t > panel.T:
        raise InvalidDimensionError(f"target {t} beyond panel end {panel.T}")
    col_of = {s: panel.series_index(s) for s in spec.series_ids}
    if spec.value_scale == "normal_score":
        if margins is None:
            raise ConfigError("normal_score features require per-series margins")
        values = np.empty_like(panel.values)
        for sid in spec.series_ids:
            col = col_of[sid]
            m = margins[sid]
            clipped = np.clip(panel.values[:, col], m.lower_y, m.upper_y)
            values[:, col] = to_normal_scores(m, clipped)
    else:
        values = panel.values
    for name in spec.exogenous:
        if name not in panel.exogenous:
            raise ConfigError(f"missing exogenous column {name!r}")
        if t >= panel.exogenous[name].size:
            raise ConfigError(f"exogenous column {name!r} not available at {t}")
    return _lag_feature_matrix(
        values, t, t + 1, spec, panel.exogenous, col_of
    )[0]


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ConfigRecord:
    """One ensemble member: weights, plug-in parameters and carried state."""

    weights: ReservoirWeights
    params: PointParams
    state: np.ndarray
    state_t: int
    draws: PosteriorDraws | None = None


@dataclass(eq=False)
class ModelFit:
    """Fitted ensemble for one series and one output-layer family."""

    family: str
    series_id: str
    feature_spec: FeatureSpec
    reservoir_config: ReservoirConfig
    records: tuple[ConfigRecord, ...]
    margin: MarginModel | None
    lower_y: float
    upper_y: float
    train_range: tuple[int, int]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if not self.records:
            raise ConfigError("ModelFit needs at least one configuration record")
        if self.family == "copula" and self.margin is None:
            raise ConfigError("copula fits require a margin")

    @property
    def K(self) -> int:
        return len(self.records)


def _default_priors(family: str, priors: dict | None):
    priors = priors or {}
    if family == "gaussian":
        return priors.get("gaussian", GaussianRidgePrior())
    if family == "skew_t":
        return priors.get("skew_t", SkewTPrior(nu=7.0))
    if family == "skew_normal":
        return priors.get("skew_normal", SkewTPrior(nu=30.0))
    return priors.get("copula", WeibullTau2Prior())


def _score_matrix(
    panel: TimeSeriesPanel, spec: FeatureSpec, margins: dict
) -> np.ndarray:
    """Normal scores of every series referenced by the spec (full panel)."""
    values = np.zeros_like(panel.values)
    for sid in spec.series_ids:
        col = panel.series_index(sid)
        m = margins[sid]
        clipped = np.clip(panel.values[:, col], m.lower_y, m.upper_y)
        values[:, col] = to_normal_scores(m, clipped)
    return values


def fit_models(
    panel: TimeSeriesPanel,
    family: str,
    spec: FeatureSpec,
    res_config: ReservoirConfig,
    train_range: tuple[int, int],
    K: int = 100,
    n_iter: int = 10_000,
    n_burn: int = 2_000,
    seed: int = 0,
    priors: dict | None = None,
    margins: dict | None = None,
    series: tuple[str, ...] | None = None,
    keep_draws: bool = False,
) -> dict[str, ModelFit]:
    """Fit the K-configuration ensemble for every requested series.

    ``train_range`` = (t0, t1) selects the regression targets; features for
    those targets reach back ``spec.max_lag`` rows before t0, so t0 must be
    at least the maximum lag.  Hidden states start from zero at t0.
    Margins (copula family) are fit on the training rows only.
    """
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    t0, t1 = train_range
    if not spec.max_lag <= t0 < t1 <= panel.T:
        raise ConfigError(
            f"train_range {train_range} incompatible with panel of {panel.T} "
            f"rows and max lag {spec.max_lag}"
        )
    series = tuple(series) if series is not None else spec.series_ids
    prior = _default_priors(family, priors)

    if family == "copula":
        if margins is None:
            margins = {
                sid: fit_bounded_kde(
                    panel.values[t0:t1, panel.series_index(sid)],
                    panel.lower_y,
                    panel.upper_y_at(t1 - 1),
                )
                for sid in spec.series_ids
            }
        value_matrix = _score_matrix(panel, spec, margins)
    else:
        value_matrix = panel.values

    col_of = {s: panel.series_index(s) for s in spec.series_ids}
    X = _lag_feature_matrix(value_matrix, t0, t1, spec, panel.exogenous, col_of)

    fits: dict[str, ModelFit] = {}
    for sid in series:
        target_col = panel.series_index(sid)
        y = value_matrix[t0:t1, target_col] if family == "copula" else \
            panel.values[t0:t1, target_col]
        records = []
        for k in range(K):
            cfg_k = replace(res_config, seed=derive_seed(seed, sid, k))
            weights = sample_weights(cfg_k, spec.n_x)
            states = run_hidden_states(weights, X, cfg_k)
            design = build_design(states, with_intercept=family != "copula")
            mcmc_seed = derive_seed(seed, sid, k, "mcmc")
            if family == "gaussian":
                draws = gibbs_gaussian(design, y, prior, n_iter, n_burn, mcmc_seed)
                params = posterior_mean(draws)
            elif family in ("skew_t", "skew_normal"):
                draws = gibbs_skew_t(design, y, prior, n_iter, n_burn, mcmc_seed)
                params = posterior_mean(draws)
                params.nu = prior.nu
            else:
                cop = mcmc_copula(
                    design, y, prior, n_iter, n_burn, mcmc_seed, margin_ref=sid
                )
                draws = cop.draws
                params = PointParams(
                    beta=cop.beta_mean, tau2=cop.tau2_mean
                )
            records.append(
                ConfigRecord(
                    weights=weights,
                    params=params,
                    state=states.h_last,
                    state_t=t1 - 1,
                    draws=draws if keep_draws else None,
                )
            )
        fits[sid] = ModelFit(
            family=family,
            series_id=sid,
            feature_spec=spec,
            reservoir_config=res_config,
            records=tuple(records),
            margin=margins[sid] if family == "copula" else None,
            lower_y=panel.lower_y,
            upper_y=panel.upper_y_at(t1 - 1),
            train_range=(t0, t1),
        )
    return fits


def advance_fits(
    fits: dict[str, ModelFit], panel: TimeSeriesPanel, through: int
) -> dict[str, ModelFit]:
    """Carry every hidden state forward over observed rows up to ``through``.

    Pure: returns new fits.  Rows consumed all predate ``through + 1``, so
    advancing never looks ahead of the forecast origin.
    """
    state_ts = {rec.state_t for fit in fits.values() for rec in fit.records}
    if state_ts == {through}:
        return fits
    if any(t > through for t in state_ts):
        raise ConfigError("fits are already advanced beyond the requested row")
    if through >= panel.T:
        raise ConfigError(f"cannot advance to unobserved row {through}")

    first = next(iter(fits.values()))
    spec = first.feature_spec
    if spec.value_scale == "normal_score":
        margins = {sid: fits[sid].margin for sid in spec.series_ids}
        value_matrix = _score_matrix(panel, spec, margins)
    else:
        value_matrix = panel.values
    col_of = {s: panel.series_index(s) for s in spec.series_ids}

    out = {}
    for sid, fit in fits.items():
        new_records = []
        for rec in fit.records:
            if rec.state_t == through:
                new_records.append(rec)
                continue
            X = _lag_feature_matrix(
                value_matrix, rec.state_t + 1, through + 1, spec,
                panel.exogenous, col_of,
            )
            path = run_hidden_states(
                rec.weights, X, fit.reservoir_config, h0=rec.state
            )
            new_records.append(
                replace(rec, state=path.h_last, state_t=through)
            )
        out[sid] = replace(fit, records=tuple(new_records))
    return out


# ---------------------------------------------------------------------------
# Predictive draws
# ---------------------------------------------------------------------------

def predictive_draw_noncopula(
    b_row, params: PointParams, family: str, rng, size: int | None = None
):
    """Draw from the one-step predictive b'beta + eps of a non-copula family."""
    b = np.asarray(b_row, dtype=float)
    mean = b @ params.beta
    if b.ndim == 1:
        shape = () if size is None else (size,)
        mean = np.broadcast_to(mean, shape) if shape else mean
    else:
        shape = (b.shape[0],)
    if family == "gaussian":
        eps = np.sqrt(params.sigma2) * rng.standard_normal(shape)
    elif family in ("skew_t", "skew_normal"):
        eps = sample_skew_t(params.psi, params.sigma2, params.nu, shape, rng)
    else:
        raise ConfigError(f"family {family!r} has no non-copula predictive")
    out = mean + eps
    return float(out) if np.ndim(out) == 0 else out


def truncate_to_bounds(
    sample, lower_y: float, upper_y: float, redraw=None, max_attempts: int = 1000
):
    """Force draws into [lower_y, upper_y] by rejection resampling.

    ``redraw(idx)`` must produce fresh draws from the same predictive for
    the (still offending) positions ``idx``; after ``max_attempts`` rounds
    the remaining offenders are clamped to the nearest bound.  Returns
    (values, n_clamped).
    """
    if lower_y >= upper_y:
        raise ConfigError("lower_y must be below upper_y")
    scalar = np.ndim(sample) == 0
    out = np.atleast_1d(np.asarray(sample, dtype=float)).copy()
    clamped = 0
    bad = (out < lower_y) | (out > upper_y)
    attempts = 0
    while bad.any() and redraw is not None and attempts < max_attempts:
        idx = np.nonzero(bad)[0]
        out[idx] = np.atleast_1d(redraw(idx))
        bad = (out < lower_y) | (out > upper_y)
        attempts += 1
    if bad.any():
        clamped = int(bad.sum())
        out[bad] = np.clip(out[bad], lower_y, upper_y)
    if scalar:
        return float(out[0]), clamped
    return out, clamped


@dataclass(eq=False)
class ForecastEnsemble:
    """Simulated sample paths from one origin plus derived summaries."""

    origin: int
    origin_timestamp: np.datetime64
    series_ids: tuple[str, ...]
    horizon: int
    family: str
    quantile_levels: tuple[float, ...]
    quantiles: np.ndarray            # (n_levels, horizon, n_series)
    means: np.ndarray                # (horizon, n_series)
    paths: np.ndarray | None = None  # (n_path, horizon, n_series)
    n_clamped: int = 0

    def level_index(self, level: float) -> int:
        return self.quantile_levels.index(level)

    def interval95(self, step: int, series: str):
        j = self.series_ids.index(series)
        return (
            self.quantiles[self.level_index(0.025), step, j],
            self.quantiles[self.level_index(0.975), step, j],
        )

    def to_rows(self):
        """Long rows (origin_ts, step, series, level, value); 'mean' included."""
        rows = []
        ts = str(np.datetime_as_string(self.origin_timestamp, unit="m"))
        for h in range(self.horizon):
            for j, sid in enumerate(self.series_ids):
                for i, lev in enumerate(self.quantile_levels):
                    rows.append((ts, h + 1, sid, f"{lev:g}",
                                 float(self.quantiles[i, h, j])))
                rows.append((ts, h + 1, sid, "mean", float(self.means[h, j])))
        return rows


def _design_rows(H: np.ndarray, with_intercept: bool) -> np.ndarray:
    blocks = [H, H * H]
    if with_intercept:
        blocks.insert(0, np.ones((H.shape[0], 1)))
    return np.hstack(blocks)


def simulate_paths(
    fits: dict[str, ModelFit],
    panel: TimeSeriesPanel,
    origin: int,
    h1: int,
    n_path: int,
    seed: int = 0,
    shared_config_index: bool = False,
    use_param_draws: bool = False,
    quantile_levels: tuple[float, ...] = DEFAULT_QUANTILE_LEVELS,
    keep_paths: bool = True,
) -> ForecastEnsemble:
    """Joint multi-step simulation across the fitted series.

    Per path, a configuration index is drawn per series (uniform over the K
    members, independently unless ``shared_config_index``).  At each step
    the series are advanced in fixed (sorted) order: features are assembled
    from observed history and previously simulated values, the hidden state
    is advanced, and a value is drawn from the family's one-step predictive
    (rejection-truncated to the admissible region for unbounded families).
    Deterministic given ``seed``.
    """
    if not fits:
        raise ConfigError("no fits supplied")
    series_order = tuple(sorted(fits))
    family = fits[series_order[0]].family
    if any(f.family != family for f in fits.values()):
        raise ConfigError("all fits in one simulation must share a family")
    for sid, fit in fits.items():
        missing = set(fit.feature_spec.series_ids) - set(fits)
        if missing:
            raise ConfigError(
                f"fit for {sid!r} references series without fits: {sorted(missing)}"
            )
    if h1 < 1 or n_path < 1:
        raise ConfigError("h1 and n_path must be positive")
    max_lag = max(f.feature_spec.max_lag for f in fits.values())
    if origin < max_lag - 1:
        raise InsufficientHistoryError(
            f"origin {origin} lies inside the {max_lag}-step warm-up"
        )
    if origin >= panel.T:
        raise ConfigError(f"origin {origin} beyond panel end")
    if shared_config_index and len({f.K for f in fits.values()}) != 1:
        raise ConfigError("shared_config_index requires equal K across series")
    if use_param_draws and any(
        rec.draws is None for f in fits.values() for rec in f.records
    ):
        raise ConfigError("use_param_draws requires fits built with keep_draws")

    # Exogenous forecast columns must cover the horizon.
    for fit in fits.values():
        for name in fit.feature_spec.exogenous:
            col = panel.exogenous.get(name)
            if col is None or col.size <= origin + h1:
                raise ConfigError(
                    f"exogenous column {name!r} not available through "
                    f"step {origin + h1}"
                )

    fits = advance_fits(fits, panel, origin)
    needs_z = family == "copula"
    margins = {sid: fits[sid].margin for sid in series_order} if needs_z else {}

    # Working value window: rows [origin + 1 - max_lag, origin + h1].
    w0 = origin + 1 - max_lag
    cols = series_order
    col_of = {sid: j for j, sid in enumerate(cols)}
    panel_cols = [panel.series_index(sid) for sid in cols]
    obs = panel.values[w0 : origin + 1][:, panel_cols]

    ywork = np.empty((n_path, max_lag + h1, len(cols)))
    ywork[:, :max_lag, :] = obs[None, :, :]
    if needs_z:
        zobs = np.empty_like(obs)
        for j, sid in enumerate(cols):
            m = margins[sid]
            zobs[:, j] = to_normal_scores(
                m, np.clip(obs[:, j], m.lower_y, m.upper_y)
            )
        zwork = np.empty_like(ywork)
        zwork[:, :max_lag, :] = zobs[None, :, :]
    else:
        zwork = None

    rng = np.random.default_rng(seed)
    kk = {}
    if shared_config_index:
        shared = rng.integers(fits[series_order[0]].K, size=n_path)
        for sid in series_order:
            kk[sid] = shared
    else:
        for sid in series_order:
            kk[sid] = rng.integers(fits[sid].K, size=n_path)
    draw_idx = {}
    if use_param_draws:
        for sid in series_order:
            n_draws = fits[sid].records[0].draws.n_draw
            draw_idx[sid] = rng.integers(n_draws, size=n_path)

    states = {}
    for sid in series_order:
        fit = fits[sid]
        n_h = fit.reservoir_config.n_h
        st = np.empty((n_path, n_h))
        for k in range(fit.K):
            st[kk[sid] == k] = fit.records[k].state
        states[sid] = st

    n_clamped = 0
    for h in range(1, h1 + 1):
        t_rel = max_lag + h - 1
        target = origin + h
        lower, upper = panel.bounds_at(target)
        exog_row = {
            name: panel.exogenous[name][target]
            for fit in fits.values()
            for name in fit.feature_spec.exogenous
        }
        for sid in series_order:
            fit = fits[sid]
            spec = fit.feature_spec
            work = zwork if spec.value_scale == "normal_score" else ywork
            X = _lag_feature_batch(work, t_rel, spec, exog_row, col_of)
            j = col_of[sid]
            for k in range(fit.K):
                sel = kk[sid] == k
                if not sel.any():
                    continue
                rec = fit.records[k]
                Hk = advance_states(
                    rec.weights, fit.reservoir_config, states[sid][sel], X[sel]
                )
                states[sid][sel] = Hk
                b = _design_rows(Hk, with_intercept=family != "copula")
                if use_param_draws:
                    y_d = np.empty(int(sel.sum()))
                    z_d = np.empty_like(y_d) if needs_z else None
                    sub_idx = draw_idx[sid][sel]
                    for di in np.unique(sub_idx):
                        ss = sub_idx == di
                        params = _params_from_draw(rec.draws, int(di), family,
                                                   rec.params)
                        yv, zv, nc = _draw_block(
                            b[ss], params, family, fit, lower, upper, rng
                        )
                        y_d[ss] = yv
                        if needs_z:
                            z_d[ss] = zv
                        n_clamped += nc
                else:
                    y_d, z_d, nc = _draw_block(
                        b, rec.params, family, fit, lower, upper, rng
                    )
                    n_clamped += nc
                ywork[sel, t_rel, j] = y_d
                if needs_z:
                    zwork[sel, t_rel, j] = z_d

    paths = ywork[:, max_lag:, :]
    if not np.isfinite(paths).all():
        bad = np.argwhere(~np.isfinite(paths))[0]
        raise NumericError(
            f"non-finite simulated value at path {bad[0]}, step {bad[1] + 1}, "
            f"series {cols[bad[2]]}"
        )
    levels = tuple(quantile_levels)
    quants = np.quantile(paths, levels, axis=0)
    ens = ForecastEnsemble(
        origin=origin,
        origin_timestamp=panel.timestamp_at(origin),
        series_ids=cols,
        horizon=h1,
        family=family,
        quantile_levels=levels,
        quantiles=quants,
        means=paths.mean(axis=0),
        paths=paths.copy() if keep_paths else None,
        n_clamped=n_clamped,
    )
    return ens


def _params_from_draw(
    draws: PosteriorDraws, i: int, family: str, fallback: PointParams
) -> PointParams:
    return PointParams(
        beta=draws.beta[i],
        sigma2=float(draws.sigma2[i]) if draws.sigma2 is not None else None,
        tau2=float(draws.tau2[i]) if draws.tau2 is not None else None,
        psi=float(draws.psi[i]) if draws.psi is not None else None,
        nu=fallback.nu,
    )


def _draw_block(b, params, family, fit, lower, upper, rng):
    """One-step draws for a block of paths sharing parameters."""
    if family == "copula":
        cop = CopulaFit(
            beta_mean=params.beta, tau2_mean=params.tau2,
            margin_ref=fit.series_id,
        )
        y_d, z_d = copula_predictive_draw(b, cop, fit.margin, rng)
        return y_d, z_d, 0
    raw = np.atleast_1d(predictive_draw_noncopula(b, params, family, rng))
    out, clamped = truncate_to_bounds(
        raw, lower, upper,
        redraw=lambda idx: predictive_draw_noncopula(b[idx], params, family, rng),
    )
    return out, None, clamped


def predictive_design_rows(
    fit: ModelFit, panel: TimeSeriesPanel, origin: int,
    margins: dict | None = None,
) -> np.ndarray:
    """Design rows b_{T+1} for every configuration (one-step, all observed)."""
    spec = fit.feature_spec
    if spec.value_scale == "normal_score" and margins is None:
        margins = {sid: fit.margin for sid in spec.series_ids}
        if any(m is None for m in margins.values()):
            raise ConfigError("need margins for every series in the spec")
    x = make_features(panel, origin + 1, spec, margins=margins)
    rows = []
    for rec in fit.records:
        if rec.state_t != origin:
            raise ConfigError("advance fits to the origin first")
        H = advance_states(
            rec.weights, fit.reservoir_config, rec.state[None, :], x[None, :]
        )
        rows.append(_design_rows(H, with_intercept=fit.family != "copula")[0])
    return np.asarray(rows)


def ensemble_density(
    fit: ModelFit,
    b_rows: np.ndarray,
    y_grid: np.ndarray,
    lower_y: float | None = None,
    upper_y: float | None = None,
) -> np.ndarray:
    """Equal-weight average of the K one-step predictive densities.

    Non-copula components are truncated to [lower_y, upper_y] and
    renormalized; copula components integrate to one over the margin
    support by construction.
    """
    b_rows = np.asarray(b_rows, dtype=float)
    if b_rows.shape[0] != fit.K:
        raise InvalidDimensionError(
            f"need one design row per configuration ({fit.K}), got "
            f"{b_rows.shape[0]}"
        )
    lower = fit.lower_y if lower_y is None else lower_y
    upper = fit.upper_y if upper_y is None else upper_y
    y_grid = np.asarray(y_grid, dtype=float)
    total = np.zeros_like(y_grid)
    for rec, b in zip(fit.records, b_rows):
        p = rec.params
        if fit.family == "copula":
            cop = CopulaFit(beta_mean=p.beta, tau2_mean=p.tau2,
                            margin_ref=fit.series_id)
            total += copula_predictive_density(y_grid, b, cop, fit.margin)
            continue
        mean = float(b @ p.beta)
        if fit.family == "gaussian":
            sd = np.sqrt(p.sigma2)
            dens = stats.norm.pdf(y_grid, loc=mean, scale=sd)
            mass = stats.norm.cdf(upper, mean, sd) - stats.norm.cdf(lower, mean, sd)
        else:
            dens = marginal_error_density_skew_t(
                y_grid - mean, p.sigma2 + p.psi**2, p.psi / np.sqrt(p.sigma2),
                p.nu,
            )
            fine = np.linspace(lower, upper, 4097)
            fdens = marginal_error_density_skew_t(
                fine - mean, p.sigma2 + p.psi**2, p.psi / np.sqrt(p.sigma2),
                p.nu,
            )
            mass = np.trapezoid(fdens, fine)
        dens = np.where((y_grid >= lower) & (y_grid <= upper), dens, 0.0)
        total += dens / mass
    return total / fit.K


# ---------------------------------------------------------------------------
# ModelFit archives
# ---------------------------------------------------------------------------

def _spec_to_json(spec: FeatureSpec) -> dict:
    return {
        "series_ids": list(spec.series_ids),
        "short_lags": list(spec.short_lags),
        "long_lags": list(spec.long_lags),
        "exogenous": list(spec.exogenous),
        "include_intercept": spec.include_intercept,
        "value_scale": spec.value_scale,
    }


def _spec_from_json(d: dict) -> FeatureSpec:
    return FeatureSpec(
        series_ids=tuple(d["series_ids"]),
        short_lags=tuple(d["short_lags"]),
        long_lags=tuple(d["long_lags"]),
        exogenous=tuple(d["exogenous"]),
        include_intercept=d["include_intercept"],
        value_scale=d["value_scale"],
    )


def save_model_fit(fit: ModelFit, path) -> None:
    """Serialize one fitted ensemble (weights, parameters, states, margin)."""
    meta = {
        "family": fit.family,
        "series_id": fit.series_id,
        "feature_spec": _spec_to_json(fit.feature_spec),
        "reservoir_config": {
            "n_h": fit.reservoir_config.n_h,
            "delta": fit.reservoir_config.delta,
            "kappa": fit.reservoir_config.kappa,
            "a_v": fit.reservoir_config.a_v,
            "a_u": fit.reservoir_config.a_u,
            "pi_v": fit.reservoir_config.pi_v,
            "pi_u": fit.reservoir_config.pi_u,
            "seed": fit.reservoir_config.seed,
        },
        "lower_y": fit.lower_y,
        "upper_y": fit.upper_y,
        "train_range": list(fit.train_range),
        "K": fit.K,
        "records": [],
    }
    arrays = {}
    for k, rec in enumerate(fit.records):
        rec_meta = {
            "state_t": rec.state_t,
            "lambda_v": rec.weights.lambda_v,
            "n_x": rec.weights.n_x,
            "sigma2": rec.params.sigma2,
            "tau2": rec.params.tau2,
            "psi": rec.params.psi,
            "nu": rec.params.nu,
        }
        meta["records"].append(rec_meta)
        V, U = rec.weights.V.tocsr(), rec.weights.U.tocsr()
        arrays[f"r{k}_V_data"] = V.data
        arrays[f"r{k}_V_indices"] = V.indices
        arrays[f"r{k}_V_indptr"] = V.indptr
        arrays[f"r{k}_U_data"] = U.data
        arrays[f"r{k}_U_indices"] = U.indices
        arrays[f"r{k}_U_indptr"] = U.indptr
        arrays[f"r{k}_state"] = rec.state
        arrays[f"r{k}_beta"] = rec.params.beta
    if fit.margin is not None:
        arrays["margin_grid"] = fit.margin.grid
        arrays["margin_pdf"] = fit.margin.pdf
        arrays["margin_cdf"] = fit.margin.cdf
        meta["margin"] = {
            "bandwidth": fit.margin.bandwidth,
            "lower_y": fit.margin.lower_y,
            "upper_y": fit.margin.upper_y,
        }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8
    )
    np.savez_compressed(path, **arrays)


def load_model_fit(path) -> ModelFit:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        cfg = ReservoirConfig(**meta["reservoir_config"])
        n_h = cfg.n_h
        records = []
        for k, rec_meta in enumerate(meta["records"]):
            n_x = rec_meta["n_x"]
            V = sparse.csr_matrix(
                (data[f"r{k}_V_data"], data[f"r{k}_V_indices"],
                 data[f"r{k}_V_indptr"]),
                shape=(n_h, n_h),
            )
            U = sparse.csr_matrix(
                (data[f"r{k}_U_data"], data[f"r{k}_U_indices"],
                 data[f"r{k}_U_indptr"]),
                shape=(n_h, n_x),
            )
            weights = ReservoirWeights(
                V=V, U=U, lambda_v=rec_meta["lambda_v"], n_x=n_x
            )
            params = PointParams(
                beta=data[f"r{k}_beta"],
                sigma2=rec_meta["sigma2"],
                tau2=rec_meta["tau2"],
                psi=rec_meta["psi"],
                nu=rec_meta["nu"],
            )
            records.append(
                ConfigRecord(
                    weights=weights, params=params,
                    state=data[f"r{k}_state"], state_t=rec_meta["state_t"],
                )
            )
        margin = None
        if "margin" in meta:
            margin = MarginModel(
                grid=data["margin_grid"], pdf=data["margin_pdf"],
                cdf=data["margin_cdf"],
                bandwidth=meta["margin"]["bandwidth"],
                lower_y=meta["margin"]["lower_y"],
                upper_y=meta["margin"]["upper_y"],
            )
        return ModelFit(
            family=meta["family"],
            series_id=meta["series_id"],
            feature_spec=_spec_from_json(meta["feature_spec"]),
            reservoir_config=cfg,
            records=tuple(records),
            margin=margin,
            lower_y=meta["lower_y"],
            upper_y=meta["upper_y"],
            train_range=tuple(meta["train_range"]),
        )
