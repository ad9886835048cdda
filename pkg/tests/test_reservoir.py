import numpy as np
import pytest
from scipy import sparse

from esncast.exceptions import InvalidDimensionError
from esncast.reservoir import (
    ReservoirConfig,
    build_design,
    derive_seed,
    run_hidden_states,
    sample_weights,
    spectral_radius,
)


class TestConfigValidation:
    def test_defaults_are_valid(self):
        cfg = ReservoirConfig()
        assert cfg.n_h == 120
        assert cfg.delta == 0.35
        assert cfg.kappa == 1.0
        assert cfg.a_v == cfg.a_u == cfg.pi_v == cfg.pi_u == 0.1

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n_h=0),
            dict(delta=0.0),
            dict(delta=1.0),
            dict(kappa=0.0),
            dict(kappa=1.5),
            dict(a_v=0.0),
            dict(pi_u=-0.1),
            dict(pi_v=1.2),
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises((ValueError, InvalidDimensionError)):
            ReservoirConfig(**kwargs)


class TestSampleWeights:
    def test_nonzero_fraction_matches_mixture(self):
        # Binomial consistency: with pi = 0.1 the nonzero fraction of each
        # matrix should sit within 3 binomial SDs of 0.1.
        cfg = ReservoirConfig(n_h=120, seed=7)
        w = sample_weights(cfg, 271)
        for mat, n in ((w.V, 120 * 120), (w.U, 120 * 271)):
            frac = mat.nnz / n
            se = np.sqrt(0.1 * 0.9 / n)
            assert abs(frac - 0.1) < 3 * se

    def test_point_mass_only_mixture(self):
        cfg = ReservoirConfig(n_h=40, pi_v=0.0, pi_u=0.0, seed=3)
        w = sample_weights(cfg, 10)
        assert w.V.nnz == 0
        assert w.U.nnz == 0
        assert w.lambda_v == 0.0

    def test_uniform_component_moments(self):
        # Oracle: Uniform(-0.1, 0.1) has mean 0 and variance 0.1^2 / 3.
        cfg = ReservoirConfig(n_h=200, pi_v=1.0, a_v=0.1, seed=11)
        w = sample_weights(cfg, 5)
        vals = w.V.toarray().ravel()
        n = vals.size
        se_mean = (0.1 / np.sqrt(3.0)) / np.sqrt(n)
        assert abs(vals.mean()) < 3 * se_mean
        assert abs(vals.var() - 0.01 / 3.0) < 0.05 * (0.01 / 3.0)

    def test_deterministic_given_seed(self):
        cfg = ReservoirConfig(n_h=30, seed=42)
        w1 = sample_weights(cfg, 12)
        w2 = sample_weights(cfg, 12)
        assert np.array_equal(w1.V.toarray(), w2.V.toarray())
        assert np.array_equal(w1.U.toarray(), w2.U.toarray())
        assert w1.lambda_v == w2.lambda_v

    def test_zero_dimension_rejected(self):
        with pytest.raises(InvalidDimensionError):
            sample_weights(ReservoirConfig(n_h=10, seed=0), 0)

    def test_derive_seed_stable_and_distinct(self):
        s1 = derive_seed(123, "series", 0)
        assert s1 == derive_seed(123, "series", 0)
        assert s1 != derive_seed(123, "series", 1)
        assert s1 != derive_seed(124, "series", 0)


class TestSpectralRadius:
    def test_identity(self):
        for n in (3, 50, 100):
            assert spectral_radius(np.eye(n)) == pytest.approx(1.0, abs=1e-10)

    def test_zero_matrix(self):
        assert spectral_radius(np.zeros((80, 80))) == 0.0

    def test_matches_dense_oracle_on_random_sparse(self):
        # Independent oracle: full dense eigendecomposition.
        rng = np.random.default_rng(0)
        for _ in range(100):
            A = rng.uniform(-0.5, 0.5, size=(50, 50))
            A[rng.random((50, 50)) > 0.1] = 0.0
            oracle = np.max(np.abs(np.linalg.eigvals(A)))
            assert spectral_radius(sparse.csr_matrix(A)) == pytest.approx(
                oracle, abs=1e-6
            )

    def test_large_matrix_power_iteration_path(self):
        rng = np.random.default_rng(5)
        # Symmetric case converges by pure power iteration (real spectrum).
        A = rng.normal(size=(150, 150))
        A = (A + A.T) / 2.0
        oracle = np.max(np.abs(np.linalg.eigvalsh(A)))
        assert spectral_radius(A) == pytest.approx(oracle, rel=1e-8)

    def test_scaled_recurrent_hits_target_radius(self):
        # Invariant: spectral radius of (delta / lambda) V equals delta.
        for seed in range(5):
            cfg = ReservoirConfig(n_h=80, seed=seed)
            w = sample_weights(cfg, 20)
            scaled = w.scaled_recurrent(cfg.delta).toarray()
            rho = np.max(np.abs(np.linalg.eigvals(scaled)))
            assert abs(rho - cfg.delta) < 1e-8

    def test_non_finite_rejected(self):
        A = np.zeros((10, 10))
        A[0, 0] = np.nan
        with pytest.raises(Exception):
            spectral_radius(A)


def _manual_weights(v: float, u: float):
    V = sparse.csr_matrix(np.array([[v]]))
    U = sparse.csr_matrix(np.array([[u]]))
    lam = abs(v)
    from esncast.reservoir import ReservoirWeights

    return ReservoirWeights(V=V, U=U, lambda_v=lam, n_x=1)


class TestHiddenStates:
    def test_zero_weights_give_zero_states(self):
        cfg = ReservoirConfig(n_h=6, pi_v=0.0, pi_u=0.0, seed=0)
        w = sample_weights(cfg, 4)
        path = run_hidden_states(w, np.ones((20, 4)), cfg)
        assert np.all(path.H == 0.0)

    def test_single_step_tanh(self):
        cfg = ReservoirConfig(n_h=1, kappa=1.0, seed=0)
        w = _manual_weights(0.0, 1.0)
        path = run_hidden_states(w, np.array([[1.0]]), cfg)
        assert path.H[0, 0] == pytest.approx(np.tanh(1.0), abs=1e-15)
        assert path.H[0, 0] == pytest.approx(0.761594, abs=1e-6)

    def test_leaky_single_step(self):
        cfg = ReservoirConfig(n_h=1, kappa=0.5, seed=0)
        w = _manual_weights(0.0, 1.0)
        path = run_hidden_states(w, np.array([[1.0]]), cfg)
        assert path.H[0, 0] == pytest.approx(0.5 * np.tanh(1.0), abs=1e-15)
        assert path.H[0, 0] == pytest.approx(0.380797, abs=1e-6)

    def test_states_bounded_when_kappa_one(self):
        cfg = ReservoirConfig(n_h=40, seed=2)
        w = sample_weights(cfg, 8)
        X = np.random.default_rng(1).normal(scale=5.0, size=(200, 8))
        path = run_hidden_states(w, X, cfg)
        assert np.all(np.abs(path.H) < 1.0)

    def test_recursion_deterministic(self):
        cfg = ReservoirConfig(n_h=25, seed=9)
        w = sample_weights(cfg, 6)
        X = np.random.default_rng(3).normal(size=(50, 6))
        p1 = run_hidden_states(w, X, cfg)
        p2 = run_hidden_states(w, X, cfg)
        assert np.array_equal(p1.H, p2.H)

    def test_prefix_consistency_exact(self):
        # Continuing from h_last must reproduce a from-scratch run bitwise.
        cfg = ReservoirConfig(n_h=30, seed=4)
        w = sample_weights(cfg, 7)
        X = np.random.default_rng(8).normal(size=(60, 7))
        full = run_hidden_states(w, X, cfg)
        head = run_hidden_states(w, X[:35], cfg)
        tail = run_hidden_states(w, X[35:], cfg, h0=head.h_last)
        assert np.array_equal(np.vstack([head.H, tail.H]), full.H)
        assert np.array_equal(tail.h_last, full.h_last)

    def test_dimension_mismatch(self):
        cfg = ReservoirConfig(n_h=5, seed=0)
        w = sample_weights(cfg, 3)
        with pytest.raises(InvalidDimensionError):
            run_hidden_states(w, np.ones((10, 4)), cfg)


class TestDesign:
    def test_row_layout_with_intercept(self):
        D = build_design(np.array([[0.5, -0.2]]), with_intercept=True)
        assert D.has_intercept
        np.testing.assert_allclose(
            D.B[0], [1.0, 0.5, -0.2, 0.25, 0.04], atol=1e-15
        )

    def test_zero_state_row(self):
        D = build_design(np.zeros((1, 3)))
        np.testing.assert_array_equal(D.B[0], [1, 0, 0, 0, 0, 0, 0])

    def test_without_intercept(self):
        D = build_design(np.array([[0.5]]), with_intercept=False)
        assert not D.has_intercept
        np.testing.assert_allclose(D.B[0], [0.5, 0.25], atol=1e-15)

    def test_square_columns_consistent(self):
        rng = np.random.default_rng(0)
        H = rng.normal(size=(11, 4))
        D = build_design(H)
        np.testing.assert_array_equal(D.B[:, 5:], D.B[:, 1:5] ** 2)
