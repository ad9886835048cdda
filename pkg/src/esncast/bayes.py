"""Bayesian estimation of the readout layer for a fixed reservoir design.

Two samplers operate on the quadratic design matrix of one configuration:

* a Gibbs sampler for the Gaussian model with a ridge shrinkage prior,
  y = B beta + eps, eps ~ N(0, sigma2),  beta | tau2 ~ N(0, tau2 I),
  sigma2 ~ IG(a, b), tau2 ~ IG(a_tilde, b_tilde); and
* a Gibbs sampler for additive skew-t errors using the conditionally
  Gaussian latent representation eps_t = psi zeta_t + e_t with
  e_t | w_t ~ N(0, sigma2 / w_t), w_t ~ Gamma(nu/2, nu/2) and
  zeta_t | w_t ~ N(0, 1/w_t) truncated to [0, inf).

Degrees of freedom nu are fixed, never estimated; nu around 30 makes the
skew-t effectively a skew-normal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

from .exceptions import InvalidDimensionError, NumericError
from .reservoir import DesignMatrix

__all__ = [
    "GaussianRidgePrior",
    "SkewTPrior",
    "PosteriorDraws",
    "PointParams",
    "gibbs_gaussian",
    "gibbs_skew_t",
    "marginal_error_density_skew_t",
    "sample_skew_t",
    "skew_t_latent_from_natural",
    "skew_t_natural_from_latent",
    "truncated_normal_nonneg",
    "posterior_mean",
    "effective_sample_size",
    "save_draws",
    "load_draws",
]


@dataclass(frozen=True)
class GaussianRidgePrior:
    """IG hyperparameters for the noise variance and the ridge variance."""

    a: float = 0.001
    b: float = 0.001
    a_tilde: float = 0.001
    b_tilde: float = 0.001

    def __post_init__(self):
        if min(self.a, self.b, self.a_tilde, self.b_tilde) <= 0.0:
            raise ValueError("all Gaussian-ridge hyperparameters must be positive")


@dataclass(frozen=True)
class SkewTPrior:
    """Hyperparameters of the skew-t readout model.

    ``C0`` defaults to half the sample variance of the response when left
    unset.  ``nu`` is the fixed degrees of freedom.
    """

    D0: float = 1.0
    c0: float = 2.5
    C0: float | None = None
    b0: float = 1.0
    B0: float = 0.005
    nu: float = 7.0

    def __post_init__(self):
        if self.nu <= 0.0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        fixed = [self.D0, self.c0, self.b0, self.B0]
        if self.C0 is not None:
            fixed.append(self.C0)
        if min(fixed) <= 0.0:
            raise ValueError("all skew-t hyperparameters must be positive")


@dataclass(eq=False)
class PosteriorDraws:
    """Post-burn-in MCMC output of one sampler run.

    ``sigma2`` is absent (None) for the copula sampler, where the noise
    scale cancels out of the model.
    """

    beta: np.ndarray
    sigma2: np.ndarray | None
    tau2: np.ndarray
    psi: np.ndarray | None = None
    zeta_mean: np.ndarray | None = None
    w_mean: np.ndarray | None = None
    n_iter: int = 0
    n_burn: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draw(self) -> int:
        return self.beta.shape[0]


@dataclass(eq=False)
class PointParams:
    """Coordinate-wise posterior means used as plug-in forecast parameters."""

    beta: np.ndarray
    sigma2: float | None = None
    tau2: float | None = None
    psi: float | None = None
    nu: float | None = None


def _as_matrix(B) -> np.ndarray:
    M = B.B if isinstance(B, DesignMatrix) else np.asarray(B, dtype=float)
    if M.ndim != 2:
        raise InvalidDimensionError(f"design must be 2-D, got shape {M.shape}")
    if not np.isfinite(M).all():
        raise NumericError("design matrix contains non-finite entries")
    return M


def _check_response(y, T: int) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.size != T:
        raise InvalidDimensionError(f"len(y)={y.size} does not match rows(B)={T}")
    if not np.isfinite(y).all():
        raise ValueError("response contains non-finite values")
    return y


def _inv_gamma(rng, shape: float, rate: float) -> float:
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def effective_sample_size(x: np.ndarray) -> float:
    """Autocorrelation-based ESS (sum of positive-lag correlations)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0.0:
        return float(n)
    acf_sum = 0.0
    for lag in range(1, min(n // 2, 1000)):
        rho = (xc[:-lag] @ xc[lag:]) / (n * var)
        if rho <= 0.0:
            break
        acf_sum += rho
    return float(n / (1.0 + 2.0 * acf_sum))


def gibbs_gaussian(
    B,
    y,
    prior: GaussianRidgePrior = GaussianRidgePrior(),
    n_iter: int = 10_000,
    n_burn: int = 2_000,
    seed: int = 0,
) -> PosteriorDraws:
    """Gibbs sampler for the Gaussian-ridge readout model.

    Full conditionals are the standard conjugate updates:
    beta | sigma2, tau2, y ~ N(S B'y / sigma2, S) with
    S = (B'B / sigma2 + I / tau2)^{-1};
    sigma2 | beta, y ~ IG(a + T/2, b + ||y - B beta||^2 / 2);
    tau2 | beta ~ IG(a_tilde + p/2, b_tilde + beta'beta / 2).

    The posterior precision is diagonalized once through an eigendecomposition
    of B'B, making each sweep O(p^2).
    """
    M = _as_matrix(B)
    T, p = M.shape
    y = _check_response(y, T)
    if n_burn >= n_iter:
        raise ValueError("n_burn must be below n_iter")
    if T < p / 4:
        warnings.warn(
            f"T={T} is below p/4={p / 4:.0f}; posterior may be prior-dominated",
            stacklevel=2,
        )

    lam, Q = np.linalg.eigh(M.T @ M)
    lam = np.clip(lam, 0.0, None)
    Qty = Q.T @ (M.T @ y)
    yty = float(y @ y)

    rng = np.random.default_rng(seed)
    sigma2 = max(float(np.var(y)), 1e-12)
    tau2 = 1.0
    n_draw = n_iter - n_burn
    beta_out = np.empty((n_draw, p))
    sig_out = np.empty(n_draw)
    tau_out = np.empty(n_draw)

    for it in range(n_iter):
        d = lam / sigma2 + 1.0 / tau2
        c = Qty / (sigma2 * d) + rng.standard_normal(p) / np.sqrt(d)
        rss = max(yty - 2.0 * (c @ Qty) + (lam * c) @ c, 0.0)
        sigma2 = _inv_gamma(rng, prior.a + 0.5 * T, prior.b + 0.5 * rss)
        bb = float(c @ c)  # ||beta||^2 = ||c||^2 since Q is orthogonal
        tau2 = _inv_gamma(rng, prior.a_tilde + 0.5 * p, prior.b_tilde + 0.5 * bb)
        if it >= n_burn:
            k = it - n_burn
            beta_out[k] = Q @ c
            sig_out[k] = sigma2
            tau_out[k] = tau2

    diag = {
        "ess_sigma2": effective_sample_size(sig_out),
        "ess_tau2": effective_sample_size(tau_out),
    }
    return PosteriorDraws(
        beta=beta_out, sigma2=sig_out, tau2=tau_out,
        n_iter=n_iter, n_burn=n_burn, diagnostics=diag,
    )


def truncated_normal_nonneg(mean, sd, rng) -> np.ndarray:
    """Draws from N(mean, sd^2) truncated to [0, inf), vectorized.

    Inverse-CDF sampling with a log-space branch for means far below zero,
    where the direct formula loses all precision.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    a = -mean / sd  # standardized truncation point
    u = rng.random(np.broadcast_shapes(mean.shape, sd.shape))
    z = np.empty_like(u)

    direct = a < 5.0
    if direct.any():
        lo = ndtr(a[direct])
        z[direct] = ndtri(lo + u[direct] * (1.0 - lo))
    tail = ~direct
    if tail.any():
        log_sf = np.log1p(-u[tail]) + log_ndtr(-a[tail])
        z[tail] = -ndtri_exp(log_sf)
    z = np.maximum(z, a)
    return np.maximum(mean + sd * z, 0.0)


def gibbs_skew_t(
    B,
    y,
    prior: SkewTPrior = SkewTPrior(),
    n_iter: int = 10_000,
    n_burn: int = 2_000,
    seed: int = 0,
) -> PosteriorDraws:
    """Gibbs sampler for the skew-t readout model via latent (zeta, w).

    Cycle: zeta_t (truncated normal), w_t (Gamma), (beta, psi) jointly
    Gaussian from the weighted regression of y on [B, zeta] with prior
    precision diag(I/tau2, 1/D0), then sigma2 and tau2 from their inverse
    gamma conditionals.
    """
    M = _as_matrix(B)
    T, p = M.shape
    y = _check_response(y, T)
    if n_burn >= n_iter:
        raise ValueError("n_burn must be below n_iter")
    if T < p / 4:
        warnings.warn(
            f"T={T} is below p/4={p / 4:.0f}; posterior may be prior-dominated",
            stacklevel=2,
        )
    nu = prior.nu
    C0 = 0.5 * float(np.var(y, ddof=1)) if prior.C0 is None else prior.C0

    rng = np.random.default_rng(seed)
    beta = np.zeros(p)
    psi = 0.0
    sigma2 = max(float(np.var(y)), 1e-12)
    tau2 = 1.0
    w = np.ones(T)
    zeta = np.full(T, np.sqrt(2.0 / np.pi))

    n_draw = n_iter - n_burn
    beta_out = np.empty((n_draw, p))
    sig_out = np.empty(n_draw)
    tau_out = np.empty(n_draw)
    psi_out = np.empty(n_draw)
    zeta_acc = np.zeros(T)
    w_acc = np.zeros(T)

    eye_p = np.eye(p)
    for it in range(n_iter):
        resid0 = y - M @ beta
        # zeta | rest: truncated normal on [0, inf)
        denom = sigma2 + psi * psi
        m_z = psi * resid0 / denom
        s_z = np.sqrt((sigma2 / denom) / w)
        zeta = truncated_normal_nonneg(m_z, s_z, rng)
        # w | rest: Gamma((nu + 2)/2, (nu + zeta^2 + r^2/sigma2)/2)
        r = resid0 - psi * zeta
        rate = 0.5 * (nu + zeta * zeta + r * r / sigma2)
        w = rng.gamma(0.5 * (nu + 2.0), 1.0 / rate)
        # (beta, psi) | rest: joint Gaussian from weighted regression
        sw = np.sqrt(w)
        Bw = M * sw[:, None]
        zw = zeta * sw
        yw = y * sw
        A = np.empty((p + 1, p + 1))
        A[:p, :p] = (Bw.T @ Bw) / sigma2 + eye_p / tau2
        A[:p, p] = A[p, :p] = (Bw.T @ zw) / sigma2
        A[p, p] = (zw @ zw) / sigma2 + 1.0 / prior.D0
        rhs = np.concatenate(((Bw.T @ yw) / sigma2, [(zw @ yw) / sigma2]))
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"posterior precision not SPD at sweep {it}") from exc
        mean = cho_solve((L, True), rhs)
        draw = mean + solve_triangular(L.T, rng.standard_normal(p + 1), lower=False)
        beta, psi = draw[:p], float(draw[p])
        # sigma2, tau2 | rest
        resid = y - M @ beta - psi * zeta
        sigma2 = _inv_gamma(
            rng, prior.c0 + 0.5 * T, C0 + 0.5 * float(w @ (resid * resid))
        )
        tau2 = _inv_gamma(rng, prior.b0 + 0.5 * p, prior.B0 + 0.5 * float(beta @ beta))
        if it >= n_burn:
            k = it - n_burn
            beta_out[k] = beta
            sig_out[k] = sigma2
            tau_out[k] = tau2
            psi_out[k] = psi
            zeta_acc += zeta
            w_acc += w

    diag = {
        "ess_sigma2": effective_sample_size(sig_out),
        "ess_psi": effective_sample_size(psi_out),
    }
    return PosteriorDraws(
        beta=beta_out, sigma2=sig_out, tau2=tau_out, psi=psi_out,
        zeta_mean=zeta_acc / n_draw, w_mean=w_acc / n_draw,
        n_iter=n_iter, n_burn=n_burn, diagnostics=diag,
    )


def marginal_error_density_skew_t(e, omega2: float, alpha: float, nu: float):
    """Closed-form skew-t density with location zero.

    p(e) = (2/omega) t_nu(e/omega) T_{nu+1}(alpha (e/omega)
           sqrt((nu+1) / (nu + (e/omega)^2)))
    """
    if omega2 <= 0.0 or nu <= 0.0:
        raise ValueError("omega2 and nu must be positive")
    omega = np.sqrt(omega2)
    x = np.asarray(e, dtype=float) / omega
    arg = alpha * x * np.sqrt((nu + 1.0) / (nu + x * x))
    out = 2.0 / omega * stats.t.pdf(x, df=nu) * stats.t.cdf(arg, df=nu + 1.0)
    return float(out) if out.ndim == 0 else out


def skew_t_latent_from_natural(omega2: float, alpha: float) -> tuple[float, float]:
    """Map (omega2, alpha) to the latent-scheme parameters (psi, sigma2)."""
    delta = alpha / np.sqrt(1.0 + alpha * alpha)
    psi = delta * np.sqrt(omega2)
    return float(psi), float(omega2 - psi * psi)


def skew_t_natural_from_latent(psi: float, sigma2: float) -> tuple[float, float]:
    """Map latent-scheme (psi, sigma2) back to (omega2, alpha)."""
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    return float(sigma2 + psi * psi), float(psi / np.sqrt(sigma2))


def sample_skew_t(psi: float, sigma2: float, nu: float, size, rng) -> np.ndarray:
    """Draw skew-t errors through the latent scheme (the model's own path)."""
    w = rng.gamma(0.5 * nu, 2.0 / nu, size=size)
    zeta = np.abs(rng.standard_normal(size)) / np.sqrt(w)
    return psi * zeta + np.sqrt(sigma2 / w) * rng.standard_normal(size)


def posterior_mean(draws: PosteriorDraws) -> PointParams:
    """Coordinate-wise means over post-burn-in draws."""
    if draws.n_draw < 1:
        raise ValueError("no post-burn-in draws")
    return PointParams(
        beta=draws.beta.mean(axis=0),
        sigma2=float(draws.sigma2.mean()) if draws.sigma2 is not None else None,
        tau2=float(draws.tau2.mean()) if draws.tau2 is not None else None,
        psi=float(draws.psi.mean()) if draws.psi is not None else None,
    )


def save_draws(draws: PosteriorDraws, path) -> None:
    """Columnar archive of the chains for audit."""
    payload = {
        "beta": draws.beta,
        "tau2": draws.tau2,
        "n_iter": np.array([draws.n_iter]),
        "n_burn": np.array([draws.n_burn]),
    }
    if draws.sigma2 is not None:
        payload["sigma2"] = draws.sigma2
    if draws.psi is not None:
        payload["psi"] = draws.psi
    if draws.zeta_mean is not None:
        payload["zeta_mean"] = draws.zeta_mean
    if draws.w_mean is not None:
        payload["w_mean"] = draws.w_mean
    np.savez_compressed(path, **payload)


def load_draws(path) -> PosteriorDraws:
    with np.load(path) as data:
        return PosteriorDraws(
            beta=data["beta"],
            sigma2=data["sigma2"] if "sigma2" in data else None,
            tau2=data["tau2"],
            psi=data["psi"] if "psi" in data else None,
            zeta_mean=data["zeta_mean"] if "zeta_mean" in data else None,
            w_mean=data["w_mean"] if "w_mean" in data else None,
            n_iter=int(data["n_iter"][0]),
            n_burn=int(data["n_burn"][0]),
        )
