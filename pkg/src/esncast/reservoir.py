"""Sparse random reservoirs: weight sampling, spectral scaling and the state recursion.

The recurrent layer is never trained.  Weights are drawn once from a
uniform/point-mass mixture, the recurrent matrix is rescaled to a fixed
spectral radius below one, and hidden states are produced by a leaky tanh
recursion.  The quadratic readout design (states and their squares) is what
the Bayesian output layers regress on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .exceptions import InvalidDimensionError, NumericError

__all__ = [
    "ReservoirConfig",
    "ReservoirWeights",
    "HiddenStatePath",
    "DesignMatrix",
    "derive_seed",
    "sample_weights",
    "spectral_radius",
    "run_hidden_states",
    "advance_states",
    "build_design",
]


def derive_seed(*parts) -> int:
    """Deterministic 64-bit substream seed from integer/string key parts.

    Independent of evaluation order across (series, configuration) grids, so
    ensemble members can be generated in parallel or lazily with identical
    results.
    """
    entropy = []
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    ss = np.random.SeedSequence(entropy=entropy)
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ReservoirConfig:
    """Hyperparameters of one reservoir configuration.

    ``n_h``      hidden dimension
    ``delta``    spectral scaling of the recurrent matrix, in (0, 1)
    ``kappa``    leaking rate, in (0, 1]
    ``a_v/a_u``  half-widths of the uniform weight components
    ``pi_v/pi_u`` probabilities that an entry is nonzero
    ``seed``     64-bit seed for the weight draw
    """

    n_h: int = 120
    delta: float = 0.35
    kappa: float = 1.0
    a_v: float = 0.1
    a_u: float = 0.1
    pi_v: float = 0.1
    pi_u: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_h < 1:
            raise InvalidDimensionError(f"n_h must be >= 1, got {self.n_h}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        for name in ("a_v", "a_u"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("pi_v", "pi_u"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(eq=False)
class ReservoirWeights:
    """Sampled hidden-layer weights for one configuration.

    ``V`` is n_h x n_h, ``U`` is n_h x n_x, both stored sparse (roughly 90%
    of entries are exactly zero at default sparsity).  ``lambda_v`` caches
    the spectral radius of ``V`` so the recursion can rescale cheaply.
    """

    V: sparse.csr_matrix
    U: sparse.csr_matrix
    lambda_v: float
    n_x: int

    @property
    def n_h(self) -> int:
        return self.V.shape[0]

    def scaled_recurrent(self, delta: float) -> sparse.csr_matrix:
        """Return (delta / lambda_v) * V, or a zero matrix when V is null."""
        if self.lambda_v > 0.0:
            return self.V * (delta / self.lambda_v)
        return self.V * 0.0


@dataclass(eq=False)
class HiddenStatePath:
    """Hidden states over a stretch of time: H is T x n_h, h_last = H[-1]."""

    H: np.ndarray
    h_last: np.ndarray


@dataclass(eq=False)
class DesignMatrix:
    """Readout design: optional intercept column, states, then squared states."""

    B: np.ndarray
    has_intercept: bool

    @property
    def shape(self):
        return self.B.shape


def sample_weights(config: ReservoirConfig, n_x: int) -> ReservoirWeights:
    """Draw the sparse weight matrices for one configuration.

    Each entry is zero with probability 1 - pi, otherwise uniform on
    (-a, a); all entries independent.  Fully deterministic given
    ``config.seed``.
    """
    if n_x < 1:
        raise InvalidDimensionError(f"n_x must be >= 1, got {n_x}")
    n_h = config.n_h
    rng = np.random.default_rng(config.seed)

    keep_v = rng.random((n_h, n_h)) < config.pi_v
    vals_v = rng.uniform(-config.a_v, config.a_v, size=(n_h, n_h))
    V = sparse.csr_matrix(np.where(keep_v, vals_v, 0.0))

    keep_u = rng.random((n_h, n_x)) < config.pi_u
    vals_u = rng.uniform(-config.a_u, config.a_u, size=(n_h, n_x))
    U = sparse.csr_matrix(np.where(keep_u, vals_u, 0.0))

    lam = spectral_radius(V)
    return ReservoirWeights(V=V, U=U, lambda_v=lam, n_x=n_x)


def _power_iteration(A, n: int, tol: float, max_iter: int, rng) -> tuple[float, bool]:
    """One power-iteration run; returns (estimate, converged)."""
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    prev = np.inf
    stable = 0
    est = 0.0
    for _ in range(max_iter):
        y = A @ x
        est = float(np.linalg.norm(y))
        if est == 0.0:
            # x fell in the null space; caller restarts with a fresh vector.
            return 0.0, False
        x = y / est
        if abs(est - prev) <= tol * max(1.0, est):
            stable += 1
            if stable >= 5:
                # Residual check guards against slow oscillation that happens
                # to repeat the same norm (complex dominant pairs).
                lam = float(x @ (A @ x))
                resid = float(np.linalg.norm(A @ x - lam * x))
                return abs(lam), resid <= 100.0 * tol * max(1.0, abs(lam))
        else:
            stable = 0
        prev = est
    return est, False


def spectral_radius(V, tol: float = 1e-10, max_iter: int = 2000) -> float:
    """Largest eigenvalue modulus of a square matrix.

    Uses power iteration with random restarts; falls back to a dense
    eigenvalue solve for small matrices or when iteration stalls (random
    sparse matrices often have a complex dominant pair, on which plain power
    iteration cannot converge).
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol and max_iter must be positive")
    n = V.shape[0]
    if V.shape[0] != V.shape[1]:
        raise InvalidDimensionError(f"matrix must be square, got {V.shape}")
    dense = V.toarray() if sparse.issparse(V) else np.asarray(V, dtype=float)
    if not np.isfinite(dense).all():
        raise NumericError("matrix contains non-finite entries")
    if n <= 64:
        return float(np.max(np.abs(np.linalg.eigvals(dense))))

    A = V if sparse.issparse(V) else dense
    rng = np.random.default_rng(0x5EED)
    for _ in range(3):
        est, converged = _power_iteration(A, n, tol, max_iter, rng)
        if converged:
            return est
    try:
        return float(np.max(np.abs(np.linalg.eigvals(dense))))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise NumericError(
            f"power iteration stalled after {max_iter} iterations x 3 restarts "
            f"and the dense solve failed: {exc}"
        ) from exc


def run_hidden_states(
    weights: ReservoirWeights,
    X: np.ndarray,
    config: ReservoirConfig,
    h0: np.ndarray | None = None,
) -> HiddenStatePath:
    """Run the leaky tanh recursion over the rows of X.

    h_t = (1 - kappa) h_{t-1} + kappa * tanh((delta / lambda_v) V h_{t-1} + U x_t)

    When ``lambda_v`` is zero (all-zero V) the recurrent term is defined as
    zero.  Continuing from ``h_last`` over appended rows reproduces a full
    run exactly.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != weights.n_x:
        raise InvalidDimensionError(
            f"X has shape {X.shape}, expected (T, {weights.n_x})"
        )
    if not np.isfinite(X).all():
        raise ValueError("feature matrix contains non-finite entries")
    n_h = weights.n_h
    h = np.zeros(n_h) if h0 is None else np.asarray(h0, dtype=float).copy()
    if h.shape != (n_h,):
        raise InvalidDimensionError(f"h0 has shape {h.shape}, expected ({n_h},)")

    T = X.shape[0]
    Vs = weights.scaled_recurrent(config.delta)
    UX = weights.U @ X.T  # (n_h, T); each column identical to a per-step matvec
    kappa = config.kappa
    H = np.empty((T, n_h))
    for t in range(T):
        h = (1.0 - kappa) * h + kappa * np.tanh(Vs @ h + UX[:, t])
        H[t] = h
    return HiddenStatePath(H=H, h_last=h.copy())


def advance_states(
    weights: ReservoirWeights,
    config: ReservoirConfig,
    H: np.ndarray,
    X: np.ndarray,
) -> np.ndarray:
    """One recursion step for a batch of states H (n, n_h) with inputs X (n, n_x)."""
    Vs = weights.scaled_recurrent(config.delta)
    A = (Vs @ H.T).T + (weights.U @ X.T).T
    return (1.0 - config.kappa) * H + config.kappa * np.tanh(A)


def build_design(states, with_intercept: bool = True) -> DesignMatrix:
    """Quadratic readout design: rows (1, h_t', (h_t^2)') or (h_t', (h_t^2)')."""
    H = states.H if isinstance(states, HiddenStatePath) else np.asarray(states, dtype=float)
    if H.ndim == 1:
        H = H[None, :]
    if not np.isfinite(H).all():
        raise ValueError("hidden states contain non-finite entries")
    blocks = [H, H**2]
    if with_intercept:
        blocks.insert(0, np.ones((H.shape[0], 1)))
    return DesignMatrix(B=np.hstack(blocks), has_intercept=with_intercept)
