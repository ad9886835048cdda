"""Generative oracles: panels simulated from models with known parameters.

Sampler-recovery, calibration and coverage assertions all need data whose
generating mechanism is known exactly.  Each family simulates forward
through the same hidden-state recursion and feature layout the estimation
stack uses, records the generating parameters, and emits panels in the file
format the pipeline ingests, so oracle checks can run through the full
stack.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .bayes import sample_skew_t
from .copula import psi_scale
from .exceptions import ConfigError, NumericError
from .forecast import FeatureSpec
from .margins import MarginModel, PriceTransform, fit_bounded_kde, margin_quantile
from .panel import TimeSeriesPanel
from .reservoir import (
    ReservoirConfig,
    ReservoirWeights,
    derive_seed,
    run_hidden_states,
    sample_weights,
)

__all__ = [
    "SynthSpec",
    "SynthTruth",
    "generate",
    "make_demand_quantile_columns",
    "default_test_margin",
]

SYNTH_FAMILIES = ("gaussian_esn", "skew_t_esn", "copula_esn", "gaussian_var")

#: Steps discarded before recording so initial transients die out.
WARMUP_STEPS = 500


def default_test_margin(
    lower_y: float = 0.0, upper_y: float = 9.6, seed: int = 0,
    skew: float = 4.0,
) -> MarginModel:
    """A right-skewed bounded margin for copula-family simulations."""
    rng = np.random.default_rng(seed)
    raw = rng.beta(2.0, skew, size=20_000)
    samples = lower_y + raw * (upper_y - lower_y)
    return fit_bounded_kde(samples, lower_y, upper_y)


@dataclass(frozen=True)
class SynthSpec:
    """Family, size and true parameters of a simulated panel."""

    family: str
    T: int
    feature_spec: FeatureSpec
    reservoir: ReservoirConfig = ReservoirConfig(n_h=30)
    beta: np.ndarray | None = None       # shared readout; drawn when None
    beta_sd: float = 0.25
    sigma2: float = 0.04                 # gaussian_esn noise variance
    psi: float = 0.0                     # skew_t_esn latent skew loading
    nu: float = 7.0
    tau2: float = 1.0                    # copula_esn shrinkage
    margin: MarginModel | None = None    # copula_esn margin (default built)
    var_coef: np.ndarray | None = None   # gaussian_var lag-1 matrix
    level: float = 7.0                   # additive level for unbounded families
    bounds_y: tuple[float, float] = (0.0, 12.0)
    seed: int = 0
    start: str = "2019-01-01T00:00"
    spacing_minutes: int = 30

    def __post_init__(self):
        if self.family not in SYNTH_FAMILIES:
            raise ConfigError(f"unknown synthetic family {self.family!r}")
        if self.T < 1:
            raise ConfigError("T must be positive")
        if self.sigma2 < 0 or self.tau2 <= 0 or self.nu <= 0:
            raise ConfigError("variance parameters out of range")


@dataclass(eq=False)
class SynthTruth:
    """Everything the generator used, for recovery oracles.

    ``residuals`` holds the additive errors of the recorded rows for the
    ESN families (raw scale), or the score-scale innovations e_t for the
    copula family; reconstruction from the panel alone is impossible
    because warm-up rows are discarded.
    """

    family: str
    feature_spec: FeatureSpec
    reservoir: ReservoirConfig
    weights: dict[str, ReservoirWeights]
    beta: dict[str, np.ndarray]
    sigma2: float
    psi: float
    nu: float
    tau2: float
    margin: MarginModel | None
    var_coef: np.ndarray | None
    level: float
    residuals: dict[str, np.ndarray] | None = None


def _panel_from_values(spec: SynthSpec, values: np.ndarray) -> TimeSeriesPanel:
    sids = spec.feature_spec.series_ids
    spacing = np.timedelta64(spec.spacing_minutes, "m")
    start = np.datetime64(spec.start)
    timestamps = start + spacing * np.arange(values.shape[0])
    lower, upper = spec.bounds_y
    return TimeSeriesPanel(
        timestamps=timestamps,
        series_ids=sids,
        values=values,
        transform=PriceTransform(),
        lower_y=lower,
        upper_y_schedule=((np.datetime64("1970-01-01"), upper),),
        exogenous={},
    )


def generate(spec: SynthSpec) -> tuple[TimeSeriesPanel, SynthTruth]:
    """Simulate a panel with known parameters; deterministic given seed."""
    fs = spec.feature_spec
    sids = fs.series_ids
    S = len(sids)
    max_lag = fs.max_lag
    total = max_lag + WARMUP_STEPS + spec.T
    rng = np.random.default_rng(derive_seed(spec.seed, "synthetic"))
    col_of = {sid: j for j, sid in enumerate(sids)}

    if spec.family == "gaussian_var":
        A = (
            np.zeros((S, S)) if spec.var_coef is None
            else np.asarray(spec.var_coef, dtype=float)
        )
        if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
            raise ConfigError("explosive VAR coefficient matrix")
        sd = np.sqrt(spec.sigma2)
        values = np.empty((total, S))
        values[0] = spec.level + sd * rng.standard_normal(S)
        for t in range(1, total):
            values[t] = (
                spec.level
                + A @ (values[t - 1] - spec.level)
                + sd * rng.standard_normal(S)
            )
        out = values[max_lag + WARMUP_STEPS :]
        panel = _panel_from_values(spec, out)
        truth = SynthTruth(
            family=spec.family, feature_spec=fs, reservoir=spec.reservoir,
            weights={}, beta={}, sigma2=spec.sigma2, psi=spec.psi, nu=spec.nu,
            tau2=spec.tau2, margin=None, var_coef=A, level=spec.level,
        )
        return panel, truth

    copula = spec.family == "copula_esn"
    margin = None
    if copula:
        margin = spec.margin or default_test_margin(seed=derive_seed(spec.seed, "m"))
        p = 2 * spec.reservoir.n_h
    else:
        p = 2 * spec.reservoir.n_h + int(fs.include_intercept)

    weights = {}
    betas = {}
    for sid in sids:
        cfg = replace(spec.reservoir, seed=derive_seed(spec.seed, sid, 0))
        weights[sid] = sample_weights(cfg, fs.n_x)
        if spec.beta is not None:
            betas[sid] = np.asarray(spec.beta, dtype=float)
            if betas[sid].shape != (p,):
                raise ConfigError(f"beta must have length {p}")
        else:
            betas[sid] = spec.beta_sd * rng.standard_normal(p)

    # Working arrays on both scales; z is the feature scale for the copula.
    ywork = np.empty((total, S))
    zwork = np.empty((total, S)) if copula else None
    if copula:
        zwork[:max_lag] = rng.standard_normal((max_lag, S))
        u = np.clip(ndtr(zwork[:max_lag]), 1e-12, 1 - 1e-12)
        ywork[:max_lag] = margin_quantile(margin, u)
    elif spec.family == "gaussian_esn":
        ywork[:max_lag] = spec.level + np.sqrt(spec.sigma2) * rng.standard_normal(
            (max_lag, S)
        )
    else:
        ywork[:max_lag] = spec.level + sample_skew_t(
            spec.psi, spec.sigma2, spec.nu, (max_lag, S), rng
        )

    states = {sid: np.zeros(spec.reservoir.n_h) for sid in sids}
    feat = zwork if copula else ywork
    scaled = {sid: weights[sid].scaled_recurrent(spec.reservoir.delta)
              for sid in sids}
    kappa = spec.reservoir.kappa
    n_lags = len(fs.lags)
    lag_arr = np.asarray(fs.lags)
    noise = np.empty((total, S))

    for t in range(max_lag, total):
        x = np.empty(fs.n_x)
        j = 0
        if fs.include_intercept:
            x[j] = 1.0
            j += 1
        for sid in sids:
            x[j : j + n_lags] = feat[t - lag_arr, col_of[sid]]
            j += n_lags
        for sid in sids:
            h = states[sid]
            h = (1.0 - kappa) * h + kappa * np.tanh(
                scaled[sid] @ h + weights[sid].U @ x
            )
            states[sid] = h
            if copula:
                b = np.concatenate([h, h * h])
                psi_t = psi_scale(b, spec.tau2)
                e_t = rng.standard_normal()
                z = psi_t * (b @ betas[sid]) + psi_t * e_t
                zwork[t, col_of[sid]] = z
                noise[t, col_of[sid]] = e_t
                uu = min(max(ndtr(z), 1e-12), 1 - 1e-12)
                ywork[t, col_of[sid]] = margin_quantile(margin, uu)
            else:
                b = np.concatenate(
                    [[1.0], h, h * h] if fs.include_intercept else [h, h * h]
                )
                mean = b @ betas[sid]
                if spec.family == "gaussian_esn":
                    eps = np.sqrt(spec.sigma2) * rng.standard_normal()
                else:
                    eps = sample_skew_t(spec.psi, spec.sigma2, spec.nu, (), rng)
                noise[t, col_of[sid]] = eps
                ywork[t, col_of[sid]] = spec.level + mean + eps

    out = ywork[max_lag + WARMUP_STEPS :]
    kept_noise = noise[max_lag + WARMUP_STEPS :]
    if not np.isfinite(out).all():
        raise NumericError("synthetic generation produced non-finite values")
    if copula:
        spec_out = replace(spec, bounds_y=(margin.lower_y, margin.upper_y))
        panel = _panel_from_values(spec_out, out)
    else:
        panel = _panel_from_values(spec, out)
    truth = SynthTruth(
        family=spec.family, feature_spec=fs, reservoir=spec.reservoir,
        weights=weights, beta=betas, sigma2=spec.sigma2, psi=spec.psi,
        nu=spec.nu, tau2=spec.tau2, margin=margin, var_coef=None,
        level=spec.level,
        residuals={sid: kept_noise[:, col_of[sid]].copy() for sid in sids},
    )
    return panel, truth


def make_demand_quantile_columns(
    panel: TimeSeriesPanel, noise_scale: float, seed: int = 0,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Synthetic stand-ins for probabilistic demand-forecast feeds.

    Builds a smooth forecast path correlated with the panel, treats the
    realized latent demand as that path plus Gaussian noise, and returns the
    10th/50th/90th percentile columns of the implied forecast distribution
    together with the latent realizations (for calibration oracles).  With
    ``noise_scale`` zero the three columns coincide.
    """
    if panel.T == 0:
        raise ConfigError("panel is empty")
    rng = np.random.default_rng(derive_seed(seed, "demand"))
    base = panel.values.mean(axis=1)
    window = min(48, panel.T)
    kernel = np.ones(window) / window
    smooth = np.convolve(base, kernel, mode="full")[: panel.T]
    # trailing mean with warm-up correction so early rows are averages too
    counts = np.minimum(np.arange(1, panel.T + 1), window)
    smooth = smooth / (counts / window)
    hour = np.arange(panel.T) * (panel.spacing / np.timedelta64(1, "h"))
    forecast_mid = smooth + 0.3 * np.sin(2.0 * np.pi * hour / 24.0)

    latent = forecast_mid + noise_scale * rng.standard_normal(panel.T)
    q10, q90 = ndtri(0.1), ndtri(0.9)
    columns = {
        "D10": forecast_mid + noise_scale * q10,
        "D50": forecast_mid.copy(),
        "D90": forecast_mid + noise_scale * q90,
    }
    return columns, latent
