"""Point and probabilistic forecast accuracy metrics.

Quantile (pinball) loss, CRPS via its quantile-score integral, an upper-tail
joint loss for (VaR, expected longrise), interval coverage, point errors,
consumption-weighted aggregation across series, marginal-calibration curves
and Diebold-Mariano comparisons with a HAC long-run variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .exceptions import ConfigError, DomainError, InvalidDimensionError

__all__ = [
    "DEFAULT_SYSTEM_WEIGHTS",
    "quantile_score",
    "crps",
    "upper_tail_loss",
    "interval_coverage",
    "point_errors",
    "system_weighted",
    "marginal_calibration",
    "CalibrationCurves",
    "dm_test",
    "dm_test_panel",
    "DMResult",
    "ScoreReport",
    "ensemble_cdf_on_grid",
]

#: Regional consumption shares used for system-weighted averages.
DEFAULT_SYSTEM_WEIGHTS = {
    "NSW": 0.3687,
    "VIC": 0.2355,
    "QLD": 0.2818,
    "SA": 0.0624,
    "TAS": 0.0516,
}


def quantile_score(q, y, alpha: float):
    """Pinball loss 2 (I(y < q) - alpha) (q - y); zero iff y = q."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    q = np.asarray(q, dtype=float)
    y = np.asarray(y, dtype=float)
    out = 2.0 * ((y < q).astype(float) - alpha) * (q - y)
    return float(out) if out.ndim == 0 else out


def crps(forecast, y: float, n_grid: int = 199) -> float:
    """CRPS as the average quantile score over an interior level grid.

    ``forecast`` is either a callable quantile function on (0, 1) or a
    sorted sample array (empirical quantiles are used then).
    """
    if n_grid < 19:
        raise ConfigError("n_grid must be at least 19")
    alphas = np.arange(1, n_grid + 1) / (n_grid + 1.0)
    if callable(forecast):
        qs = np.asarray(forecast(alphas), dtype=float)
    else:
        sample = np.asarray(forecast, dtype=float)
        if sample.ndim != 1 or sample.size == 0:
            raise InvalidDimensionError("sample forecast must be a 1-D array")
        if np.isnan(sample).any():
            raise ValueError("sample forecast contains NaN")
        if np.any(np.diff(sample) < 0):
            raise ValueError("sample forecast must be sorted")
        qs = np.quantile(sample, alphas)
    scores = 2.0 * ((y < qs).astype(float) - alphas) * (qs - y)
    # Trapezoid rule on {0, alphas, 1} with the integrand's zero limits
    # anchored at both endpoints.
    inner = np.trapezoid(scores, alphas)
    caps = 0.5 * (scores[0] + scores[-1]) / (n_grid + 1.0)
    return float(inner + caps)


def upper_tail_loss(q: float, el: float, y: float, alpha: float = 0.975) -> float:
    """Joint loss for the upper-tail pair (VaR_alpha, expected longrise).

    I(y >= q) (-q + y - G2(el)(q - y)) + (1 - alpha)(q - G2(el)(el - q) + G3(el))
    with G2(x) = exp(-x) and G3(x) = 2 - exp(-x), so G3' = G2 and G2 is
    positive and decreasing.  With an increasing G2 the expectation is
    *maximized* at the true pair rather than minimized, so propriety for an
    upper-tail functional forces the decreasing choice; the additive
    constant in G3 pins the loss value at q = el = 0.

    The expected loss is minimized at q = F^{-1}(alpha) and
    el = E[Y | Y >= q].  Inputs with |el| > 700 are rejected (the
    exponential overflows or degenerates), signalling the caller to score
    on the working (log) scale.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    q = np.asarray(q, dtype=float)
    el = np.asarray(el, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(np.abs(el) > 700.0):
        raise DomainError(
            "expected-longrise magnitudes above 700 overflow exp(); score on "
            "the log scale instead"
        )
    g2 = np.exp(-el)
    g3 = 2.0 - g2
    hit = (y >= q).astype(float)
    out = hit * (-q + y - g2 * (q - y)) + (1.0 - alpha) * (
        q - g2 * (el - q) + g3
    )
    return float(out) if out.ndim == 0 else out


def interval_coverage(lower, upper, y) -> float:
    """Fraction of observations inside [lower, upper] element-wise."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (lower.shape == upper.shape == y.shape):
        raise InvalidDimensionError("lower, upper and y must share a shape")
    if np.any(lower > upper):
        raise DomainError("lower bound exceeds upper bound")
    return float(np.mean((y >= lower) & (y <= upper)))


def point_errors(point_forecast, y) -> tuple[float, float]:
    """(MAE, RMSE) of a point forecast."""
    f = np.asarray(point_forecast, dtype=float)
    y = np.asarray(y, dtype=float)
    if f.size == 0 or f.shape != y.shape:
        raise InvalidDimensionError("forecast and observations must match")
    err = f - y
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def system_weighted(values, weights) -> float:
    """Weighted average across series; weights must sum to one."""
    if isinstance(values, dict):
        keys = sorted(values)
        v = np.array([values[k] for k in keys], dtype=float)
        w = np.array([weights[k] for k in keys], dtype=float)
    else:
        v = np.asarray(values, dtype=float)
        w = np.asarray(weights, dtype=float)
    if v.shape != w.shape:
        raise InvalidDimensionError("values and weights must align")
    if np.any(w < 0.0):
        raise DomainError("weights must be nonnegative")
    if abs(w.sum() - 1.0) > 1e-6:
        raise DomainError(f"weights sum to {w.sum()}, expected 1")
    return float(v @ w)


@dataclass(eq=False)
class CalibrationCurves:
    """Empirical CDF of realizations vs average predictive CDF on a grid."""

    y_grid: np.ndarray
    h_hat: np.ndarray
    f_bar: np.ndarray

    def __post_init__(self):
        for curve in (self.h_hat, self.f_bar):
            if np.any(curve < -1e-9) or np.any(curve > 1.0 + 1e-9):
                raise ValueError("calibration curves must lie in [0, 1]")
            if np.any(np.diff(curve) < -1e-9):
                raise ValueError("calibration curves must be nondecreasing")

    @property
    def sup_distance(self) -> float:
        return float(np.max(np.abs(self.h_hat - self.f_bar)))


def ensemble_cdf_on_grid(paths: np.ndarray, y_grid: np.ndarray) -> np.ndarray:
    """Empirical CDF of a sample-based forecast evaluated on a grid."""
    s = np.sort(np.asarray(paths, dtype=float))
    return np.searchsorted(s, y_grid, side="right") / s.size


def marginal_calibration(pred_cdfs, observations, y_grid) -> CalibrationCurves:
    """Average predictive CDF and empirical CDF over matched forecast cases.

    ``pred_cdfs`` is an (N, G) matrix of predictive CDF values on ``y_grid``
    (one row per forecast case), ``observations`` the matching realized
    values.
    """
    F = np.asarray(pred_cdfs, dtype=float)
    obs = np.asarray(observations, dtype=float)
    grid = np.asarray(y_grid, dtype=float)
    if F.ndim != 2 or F.shape[0] != obs.size or F.shape[1] != grid.size:
        raise InvalidDimensionError(
            f"pred_cdfs {F.shape} incompatible with {obs.size} observations "
            f"and grid of {grid.size}"
        )
    if obs.size == 0:
        raise ConfigError("no forecast cases to calibrate against")
    h_hat = (obs[:, None] <= grid[None, :]).mean(axis=0)
    f_bar = F.mean(axis=0)
    return CalibrationCurves(y_grid=grid, h_hat=h_hat, f_bar=f_bar)


class DMResult(NamedTuple):
    statistic: float
    p_value: float
    degenerate: bool


def dm_test(loss_a, loss_b, horizon_step: int = 1) -> DMResult:
    """Diebold-Mariano test of equal mean loss.

    The long-run variance of the loss differential uses a Bartlett kernel
    with lag (horizon_step - 1); the reference distribution is standard
    normal and the p-value two-sided.
    """
    a = np.asarray(loss_a, dtype=float)
    b = np.asarray(loss_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidDimensionError("loss series must be equal-length vectors")
    n = a.size
    if n < 30:
        raise ConfigError(f"need at least 30 losses, got {n}")
    if horizon_step < 1:
        raise DomainError("horizon_step must be >= 1")
    d = a - b
    dbar = d.mean()
    dc = d - dbar
    gamma0 = float(dc @ dc) / n
    if gamma0 == 0.0:
        return DMResult(statistic=0.0, p_value=1.0, degenerate=True)
    L = horizon_step - 1
    lrv = gamma0
    for j in range(1, min(L, n - 1) + 1):
        gamma_j = float(dc[:-j] @ dc[j:]) / n
        lrv += 2.0 * (1.0 - j / (L + 1.0)) * gamma_j
    if lrv <= 0.0:
        lrv = gamma0
    stat = dbar / np.sqrt(lrv / n)
    p = 2.0 * (1.0 - ndtr(abs(stat)))
    return DMResult(statistic=float(stat), p_value=float(p), degenerate=False)


def dm_test_panel(
    loss_a: dict, loss_b: dict, horizon_step: int = 1, weights: dict | None = None
) -> dict:
    """Per-series DM tests plus a pooled test on the weight-averaged losses."""
    series = sorted(loss_a)
    if sorted(loss_b) != series:
        raise InvalidDimensionError("loss panels must cover the same series")
    out = {sid: dm_test(loss_a[sid], loss_b[sid], horizon_step) for sid in series}
    if weights is None:
        weights = {sid: 1.0 / len(series) for sid in series}
    wa = sum(np.asarray(loss_a[sid]) * weights[sid] for sid in series)
    wb = sum(np.asarray(loss_b[sid]) * weights[sid] for sid in series)
    out["pooled"] = dm_test(wa, wb, horizon_step)
    return out


@dataclass(eq=False)
class ScoreReport:
    """Tidy score table: one row per (model, series, step, metric)."""

    table: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(
            columns=["model", "series", "step", "metric", "value"]
        )
    )
    metadata: dict = field(default_factory=dict)

    def add(self, model: str, series: str, step: int, metric: str, value: float):
        if not np.isfinite(value):
            raise ValueError(
                f"non-finite score {metric} for {model}/{series}/step {step}"
            )
        self.table.loc[len(self.table)] = [model, series, int(step), metric,
                                           float(value)]

    def value(self, model: str, series: str, step: int, metric: str) -> float:
        t = self.table
        sel = t[
            (t.model == model) & (t.series == series) & (t.step == step)
            & (t.metric == metric)
        ]
        if len(sel) != 1:
            raise KeyError((model, series, step, metric))
        return float(sel.value.iloc[0])

    def add_system_rows(self, weights: dict) -> None:
        """Append consumption-weighted aggregate rows as series 'SYSTEM'."""
        t = self.table
        body = t[t.series != "SYSTEM"]
        for (model, step, metric), grp in body.groupby(
            ["model", "step", "metric"], sort=True
        ):
            vals = dict(zip(grp.series, grp.value))
            if set(vals) != set(weights):
                continue
            self.add(model, "SYSTEM", step, metric,
                     system_weighted(vals, weights))

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False)

    def to_text(self, steps: list[int] | None = None) -> str:
        """Metric blocks x horizon columns, one row per (model, series)."""
        t = self.table
        steps = steps or sorted(t.step.unique())
        lines = []
        for metric in sorted(t.metric.unique()):
            lines.append(f"== {metric} ==")
            header = f"{'model':<14}{'series':<10}" + "".join(
                f"{('h=' + str(s)):>12}" for s in steps
            )
            lines.append(header)
            block = t[t.metric == metric]
            for (model, series), grp in block.groupby(["model", "series"],
                                                      sort=True):
                by_step = dict(zip(grp.step, grp.value))
                cells = "".join(
                    f"{by_step.get(s, float('nan')):>12.4f}" for s in steps
                )
                lines.append(f"{model:<14}{series:<10}{cells}")
            lines.append("")
        return "\n".join(lines)
