"""Marginal distribution machinery: price transform, bounded KDE, normal scores.

The margin of the log-price series is estimated once per training window by
a Gaussian-kernel KDE with boundary reflection at the admissible price
bounds, evaluated on a uniform grid.  CDF and quantile evaluation are exact
piecewise-linear operations on that grid, which keeps them fast, invertible
and platform-reproducible.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import ndtr, ndtri

from .exceptions import DegenerateSampleError, DomainError

__all__ = [
    "PriceTransform",
    "MarginModel",
    "transform_price",
    "inverse_transform_price",
    "fit_bounded_kde",
    "margin_pdf",
    "margin_cdf",
    "margin_quantile",
    "to_normal_scores",
    "save_margin",
    "load_margin",
]

#: CDF clamp applied before the normal quantile so scores stay finite.
SCORE_EPS = 1e-7

#: Number of uniform grid points a fitted margin is evaluated on.
DEFAULT_GRID_SIZE = 2048


@dataclass(frozen=True)
class PriceTransform:
    """Log transform mapping nominal prices onto the working scale.

    y = log(price + shift).  With the default shift the floor price maps to
    y = 0.  ``cap_includes_shift`` selects whether the upper working bound
    for a cap c is log(c + shift) (consistent with the transform) or log(c);
    both conventions appear in practice.
    """

    shift: float = 1001.0
    lower_price: float = -1000.0
    upper_price: float = 14500.0
    cap_includes_shift: bool = True

    def __post_init__(self):
        if self.lower_price + self.shift <= 0.0:
            raise DomainError(
                f"lower_price + shift must be positive, got "
                f"{self.lower_price} + {self.shift}"
            )
        if self.upper_price <= self.lower_price:
            raise DomainError("upper_price must exceed lower_price")

    @property
    def lower_y(self) -> float:
        return float(np.log(self.lower_price + self.shift))

    @property
    def upper_y(self) -> float:
        return self.y_for_cap(self.upper_price)

    def y_for_cap(self, cap: float) -> float:
        if self.cap_includes_shift:
            return float(np.log(cap + self.shift))
        return float(np.log(cap))


def transform_price(p, t: PriceTransform):
    """y = log(p + shift); raises if p + shift <= 0."""
    p = np.asarray(p, dtype=float)
    bad = np.atleast_1d(p + t.shift <= 0.0)
    if bad.any():
        idx = np.nonzero(bad)[0]
        raise DomainError(
            f"price + shift must be positive; offending indices {idx[:10].tolist()}"
        )
    out = np.log(p + t.shift)
    return float(out) if out.ndim == 0 else out

def inverse_transform_price(y, t: PriceTransform):
    """p = exp(y) - shift; exact round trip with transform_price to ~1e-12."""
    y = np.asarray(y, dtype=float)
    out = np.exp(y) - t.shift
    return float(out) if out.ndim == 0 else out


@dataclass(eq=False)
class MarginModel:
    """Bounded kernel density estimate on a uniform grid.

    ``pdf`` integrates to one over [lower_y, upper_y] (trapezoid rule) and is
    exactly zero outside; ``cdf`` is its cumulative trapezoidal integral.
    """

    grid: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray
    bandwidth: float
    lower_y: float
    upper_y: float

    @property
    def median(self) -> float:
        return margin_quantile(self, 0.5)


def _silverman_bandwidth(x: np.ndarray) -> float:
    n = x.size
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    return 0.9 * spread * n ** (-0.2)


def _reflected_kde_on_grid(
    samples: np.ndarray, h: float, grid: np.ndarray
) -> np.ndarray:
    """Gaussian KDE with reflection at both grid ends, evaluated on ``grid``.

    Samples are linearly binned onto the grid and convolved with the kernel
    (FFT); the unreflected density is computed on a 3x extended grid and the
    two outside thirds are folded back, which equals summing the kernel over
    the sample images mirrored at each bound.  Binning error is O((step/h)^2)
    and negligible at the default grid size.
    """
    G = grid.size
    lo, step = grid[0], grid[1] - grid[0]

    pos = (samples - lo) / step
    i0 = np.clip(np.floor(pos).astype(int), 0, G - 2)
    frac = pos - i0
    weights = np.zeros(G)
    np.add.at(weights, i0, 1.0 - frac)
    np.add.at(weights, i0 + 1, frac)

    M = G - 1
    ext = np.zeros(3 * G - 2)
    ext[M : M + G] = weights
    half = ext.size - 1
    offsets = np.arange(-half, half + 1) * step
    kernel = np.exp(-0.5 * (offsets / h) ** 2)
    kernel /= samples.size * h * np.sqrt(2.0 * np.pi)
    dens = fftconvolve(ext, kernel, mode="same")
    center = dens[M : M + G]
    left_fold = dens[M::-1]
    right_fold = dens[M + G - 1 :][::-1]
    return np.maximum(center + left_fold + right_fold, 0.0)


def fit_bounded_kde(
    samples,
    lower_y: float,
    upper_y: float,
    bandwidth: float | None = None,
    grid_size: int = DEFAULT_GRID_SIZE,
) -> MarginModel:
    """Fit a Gaussian KDE with reflection at both bounds.

    The density is evaluated on a uniform grid over [lower_y, upper_y] and
    renormalized so its trapezoidal integral is exactly one (reflection
    preserves mass up to kernel tails beyond the mirrored images).
    Bandwidth defaults to Silverman's rule of thumb.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 30:
        raise DegenerateSampleError(f"need at least 30 samples, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("samples contain non-finite values")
    if lower_y >= upper_y:
        raise DomainError("lower_y must be below upper_y")
    outside = (x < lower_y) | (x > upper_y)
    if outside.any():
        idx = np.nonzero(outside)[0]
        shown = ", ".join(f"[{i}]={x[i]:.6g}" for i in idx[:10])
        raise DomainError(
            f"{idx.size} samples outside [{lower_y}, {upper_y}]: {shown}"
        )
    if np.all(x == x[0]):
        raise DegenerateSampleError("all samples identical; margin is degenerate")

    h = _silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if h <= 0.0:
        raise DomainError(f"bandwidth must be positive, got {h}")

    grid = np.linspace(lower_y, upper_y, grid_size)
    pdf = _reflected_kde_on_grid(x, h, grid)

    # Tiny floor keeps the CDF strictly increasing so the quantile inverse is
    # single-valued; it is invisible after renormalization.
    pdf = np.maximum(pdf, pdf.max() * 1e-15)
    raw_cdf = np.concatenate(
        ([0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid)))
    )
    total = raw_cdf[-1]
    pdf = pdf / total
    cdf = raw_cdf / total
    cdf[0], cdf[-1] = 0.0, 1.0
    return MarginModel(
        grid=grid, pdf=pdf, cdf=cdf, bandwidth=h, lower_y=float(lower_y),
        upper_y=float(upper_y),
    )


def margin_pdf(m: MarginModel, y):
    """Density at y; zero outside [lower_y, upper_y]."""
    y = np.asarray(y, dtype=float)
    out = np.interp(y, m.grid, m.pdf, left=0.0, right=0.0)
    inside = (y >= m.lower_y) & (y <= m.upper_y)
    out = np.where(inside, out, 0.0)
    return float(out) if out.ndim == 0 else out


def margin_cdf(m: MarginModel, y):
    """Distribution function at y by monotone linear interpolation."""
    y = np.asarray(y, dtype=float)
    out = np.interp(y, m.grid, m.cdf, left=0.0, right=1.0)
    return float(out) if out.ndim == 0 else out


def margin_quantile(m: MarginModel, u):
    """Exact piecewise-linear inverse of the grid CDF; u must lie in (0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise DomainError("quantile levels must lie strictly inside (0, 1)")
    out = np.interp(u, m.cdf, m.grid)
    return float(out) if out.ndim == 0 else out


def to_normal_scores(m: MarginModel, y):
    """z = Phi^{-1}(F_Y(y)) with the CDF clamped away from {0, 1}."""
    y = np.asarray(y, dtype=float)
    tol = 1e-9 * max(1.0, abs(m.upper_y - m.lower_y))
    if np.any(y < m.lower_y - tol) or np.any(y > m.upper_y + tol):
        raise DomainError("values outside the margin bounds")
    u = np.clip(margin_cdf(m, y), SCORE_EPS, 1.0 - SCORE_EPS)
    out = ndtri(u)
    return float(out) if np.ndim(out) == 0 else out


def from_normal_scores(m: MarginModel, z):
    """y = F_Y^{-1}(Phi(z)); always lands inside [lower_y, upper_y]."""
    u = ndtr(np.asarray(z, dtype=float))
    u = np.clip(u, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return margin_quantile(m, u)


# ---------------------------------------------------------------------------
# Serialization: flat columnar text with a small key=value header, so fits
# can be reused across backtest windows and inspected with standard tools.
# ---------------------------------------------------------------------------

def save_margin(m: MarginModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# bandwidth={float(m.bandwidth)!r}\n")
        fh.write(f"# lower_y={float(m.lower_y)!r}\n")
        fh.write(f"# upper_y={float(m.upper_y)!r}\n")
        fh.write("grid,pdf,cdf\n")
        for g, p, c in zip(m.grid, m.pdf, m.cdf):
            fh.write(f"{float(g)!r},{float(p)!r},{float(c)!r}\n")


def load_margin(path) -> MarginModel:
    meta = {}
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = float(val)
        else:
            body_start = i
            break
    data = np.loadtxt(
        io.StringIO("\n".join(lines[body_start + 1 :])), delimiter=","
    )
    return MarginModel(
        grid=data[:, 0], pdf=data[:, 1], cdf=data[:, 2],
        bandwidth=meta["bandwidth"], lower_y=meta["lower_y"],
        upper_y=meta["upper_y"],
    )
