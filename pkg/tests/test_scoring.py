import numpy as np
import pandas as pd
import pytest
from scipy import stats

from esncast.exceptions import ConfigError, DomainError, InvalidDimensionError
from esncast.scoring import (
    DEFAULT_SYSTEM_WEIGHTS,
    CalibrationCurves,
    ScoreReport,
    crps,
    dm_test,
    dm_test_panel,
    ensemble_cdf_on_grid,
    interval_coverage,
    marginal_calibration,
    point_errors,
    quantile_score,
    system_weighted,
    upper_tail_loss,
)

GAUSS_CRPS_AT_MEAN = (np.sqrt(2.0) - 1.0) / np.sqrt(np.pi)  # 0.23370


class TestQuantileScore:
    def test_zero_at_quantile(self):
        assert quantile_score(1.7, 1.7, 0.3) == 0.0

    def test_direct_value(self):
        assert quantile_score(1.0, 0.0, 0.95) == pytest.approx(0.1, abs=1e-12)

    def test_nonnegative_piecewise_linear(self):
        y, alpha = 0.4, 0.7
        qs = np.linspace(-3, 3, 601)
        vals = quantile_score(qs, y, alpha)
        assert np.all(vals >= 0.0)
        # linear on each side of the kink at q = y
        left = qs <= y
        for side in (left, ~left):
            d2 = np.diff(vals[side], 2)
            assert np.max(np.abs(d2)) < 1e-9

    def test_empirical_minimizer_is_true_quantile(self):
        # Elicitation oracle by simulation.
        rng = np.random.default_rng(0)
        ys = rng.standard_normal(200_000)
        for alpha in (0.05, 0.5, 0.95):
            grid = np.linspace(-3.0, 3.0, 121)
            risk = [np.mean(quantile_score(q, ys, alpha)) for q in grid]
            qhat = grid[int(np.argmin(risk))]
            assert abs(qhat - stats.norm.ppf(alpha)) <= 0.1  # 2 grid cells

    def test_alpha_domain(self):
        with pytest.raises(DomainError):
            quantile_score(0.0, 0.0, 1.0)


class TestCrps:
    def test_degenerate_forecast_is_zero(self):
        assert crps(lambda a: np.full_like(a, 2.5), 2.5) == pytest.approx(0.0,
                                                                          abs=1e-12)

    def test_gaussian_closed_form(self):
        assert crps(stats.norm.ppf, 0.0) == pytest.approx(
            GAUSS_CRPS_AT_MEAN, abs=1e-3
        )

    def test_sample_quantiles_match_callable(self):
        rng = np.random.default_rng(1)
        sample = np.sort(rng.standard_normal(100_000))
        assert crps(sample, 0.0) == pytest.approx(GAUSS_CRPS_AT_MEAN, abs=5e-3)

    def test_equivalent_sample_form(self):
        # Oracle: CRPS(F, y) = E|X - y| - 0.5 E|X - X'|.
        rng = np.random.default_rng(2)
        sample = rng.gamma(2.0, 1.5, size=100_000)
        y = 3.1
        via_quantiles = crps(np.sort(sample), y)
        half = sample.size // 2
        term1 = np.abs(sample - y)
        term2 = np.abs(sample[:half] - sample[half:])
        sample_form = term1.mean() - 0.5 * term2.mean()
        se = np.hypot(term1.std() / np.sqrt(sample.size),
                      0.5 * term2.std() / np.sqrt(half))
        assert abs(via_quantiles - sample_form) < 3 * se + 5e-3

    def test_unsorted_and_nan_rejected(self):
        with pytest.raises(ValueError):
            crps(np.array([3.0, 1.0, 2.0]), 0.0)
        with pytest.raises(ValueError):
            crps(np.array([1.0, np.nan]), 0.0)
        with pytest.raises(ConfigError):
            crps(stats.norm.ppf, 0.0, n_grid=5)


class TestUpperTailLoss:
    def test_below_var_value(self):
        assert upper_tail_loss(0.0, 0.0, -1.0, 0.975) == pytest.approx(
            0.025, abs=1e-12
        )

    def test_at_var_value(self):
        assert upper_tail_loss(0.0, 0.0, 0.0, 0.975) == pytest.approx(
            0.025, abs=1e-12
        )

    def test_finite_for_finite_inputs(self):
        rng = np.random.default_rng(3)
        vals = upper_tail_loss(
            rng.normal(size=100), rng.normal(size=100), rng.normal(size=100)
        )
        assert np.all(np.isfinite(vals))

    def test_overflow_guard(self):
        with pytest.raises(DomainError, match="log scale"):
            upper_tail_loss(0.0, 701.0, 0.0)

    def test_joint_elicitation_small(self):
        # Coarse grid version of the elicitation oracle (full grid in the
        # acceptance suite).
        rng = np.random.default_rng(4)
        ys = rng.standard_normal(400_000)
        q_true = stats.norm.ppf(0.975)
        el_true = stats.norm.pdf(q_true) / 0.025
        qs = np.linspace(1.2, 2.8, 17)
        els = np.linspace(1.6, 3.2, 17)
        best, arg = np.inf, None
        for q in qs:
            for el in els:
                risk = float(np.mean(upper_tail_loss(q, el, ys)))
                if risk < best:
                    best, arg = risk, (q, el)
        assert abs(arg[0] - q_true) <= 0.1 + 1e-9
        assert abs(arg[1] - el_true) <= 0.1 + 1e-9


class TestCoverageAndPointErrors:
    def test_all_inside(self):
        y = np.array([0.0, 1.0, 2.0])
        assert interval_coverage(y - 1, y + 1, y) == 1.0

    def test_all_outside(self):
        y = np.array([5.0, 6.0])
        assert interval_coverage(y - 3, y - 2, y) == 0.0

    def test_gaussian_self_consistency(self):
        rng = np.random.default_rng(5)
        y = rng.standard_normal(10_000)
        lo = np.full_like(y, stats.norm.ppf(0.025))
        hi = np.full_like(y, stats.norm.ppf(0.975))
        assert abs(interval_coverage(lo, hi, y) - 0.95) < 0.01

    def test_bound_order_checked(self):
        with pytest.raises(DomainError):
            interval_coverage(np.array([1.0]), np.array([0.0]), np.array([0.5]))

    def test_point_errors_examples(self):
        assert point_errors([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)
        mae, rmse = point_errors([1.0, -1.0], [0.0, 0.0])
        assert (mae, rmse) == (1.0, 1.0)
        mae, rmse = point_errors([0.0, 2.0], [0.0, 0.0])
        assert mae == 1.0 and rmse == pytest.approx(np.sqrt(2.0))
        with pytest.raises(InvalidDimensionError):
            point_errors([], [])


class TestSystemWeighted:
    def test_default_weights_valid(self):
        assert sum(DEFAULT_SYSTEM_WEIGHTS.values()) == pytest.approx(1.0, abs=1e-6)
        assert DEFAULT_SYSTEM_WEIGHTS["NSW"] == 0.3687
        assert DEFAULT_SYSTEM_WEIGHTS["VIC"] == 0.2355

    def test_equal_values(self):
        vals = {k: 4.2 for k in DEFAULT_SYSTEM_WEIGHTS}
        assert system_weighted(vals, DEFAULT_SYSTEM_WEIGHTS) == pytest.approx(4.2)

    def test_one_hot(self):
        weights = {"A": 1.0, "B": 0.0}
        assert system_weighted({"A": 7.0, "B": -3.0}, weights) == 7.0

    def test_weight_sum_checked(self):
        with pytest.raises(DomainError):
            system_weighted({"A": 1.0, "B": 2.0}, {"A": 0.6, "B": 0.6})


class TestMarginalCalibration:
    def test_forecast_equals_empirical_distribution(self):
        rng = np.random.default_rng(6)
        obs = rng.normal(size=300)
        grid = np.linspace(-4, 4, 101)
        ecdf = (np.sort(obs)[None, :] <= 0).mean()  # noqa: F841 (clarity)
        row = (obs[None, :, None] <= grid[None, None, :]).mean(axis=1)
        pred = np.repeat(row, 300, axis=0)
        curves = marginal_calibration(pred, obs, grid)
        np.testing.assert_allclose(curves.f_bar, curves.h_hat, atol=1e-12)

    def test_degenerate_point_forecasts_at_truth(self):
        rng = np.random.default_rng(7)
        obs = rng.normal(size=200)
        grid = np.linspace(-4, 4, 81)
        pred = (obs[:, None] <= grid[None, :]).astype(float)
        curves = marginal_calibration(pred, obs, grid)
        np.testing.assert_array_equal(curves.f_bar, curves.h_hat)
        assert curves.sup_distance == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            marginal_calibration(np.empty((0, 5)), np.empty(0), np.zeros(5))

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            CalibrationCurves(
                y_grid=np.arange(3.0),
                h_hat=np.array([0.0, 0.5, 1.0]),
                f_bar=np.array([0.9, 0.5, 1.0]),
            )

    def test_ensemble_cdf_on_grid(self):
        paths = np.array([1.0, 2.0, 3.0, 4.0])
        grid = np.array([0.5, 2.0, 3.5, 9.0])
        np.testing.assert_allclose(
            ensemble_cdf_on_grid(paths, grid), [0.0, 0.5, 0.75, 1.0]
        )


class TestDieboldMariano:
    def test_identical_losses_degenerate(self):
        loss = np.arange(40.0)
        res = dm_test(loss, loss.copy())
        assert res.degenerate
        assert res.statistic == 0.0

    def test_strong_signal(self):
        # Analytic oracle: mean 1, sd 0.1, n = 100 gives |stat| ~ 100.
        rng = np.random.default_rng(8)
        d = 1.0 + 0.1 * rng.standard_normal(100)
        res = dm_test(d, np.zeros(100))
        assert abs(res.statistic) > 10.0
        assert res.p_value < 1e-10
        assert not res.degenerate

    def test_size_simulation(self):
        # Size oracle at the 5% level (coarse version; acceptance runs 1e4).
        rng = np.random.default_rng(9)
        n_rep, n = 2000, 400
        rejections = 0
        for _ in range(n_rep):
            d = rng.standard_normal(n)
            res = dm_test(d, np.zeros(n))
            rejections += res.p_value < 0.05
        assert 0.03 < rejections / n_rep < 0.07

    def test_bartlett_lag_follows_horizon(self):
        rng = np.random.default_rng(10)
        e = rng.standard_normal(501)
        d = e[1:] + e[:-1]  # MA(1): 2-step-ahead style overlap
        r1 = dm_test(d, np.zeros(500), horizon_step=1)
        r2 = dm_test(d, np.zeros(500), horizon_step=2)
        # HAC variance grows once the MA structure is acknowledged
        assert abs(r2.statistic) < abs(r1.statistic)

    def test_length_checks(self):
        with pytest.raises(ConfigError):
            dm_test(np.ones(10), np.zeros(10))
        with pytest.raises(InvalidDimensionError):
            dm_test(np.ones(40), np.zeros(41))

    def test_panel_pooling(self):
        rng = np.random.default_rng(11)
        la = {"A": rng.normal(size=100), "B": rng.normal(size=100)}
        lb = {"A": rng.normal(size=100), "B": rng.normal(size=100)}
        out = dm_test_panel(la, lb, weights={"A": 0.7, "B": 0.3})
        assert set(out) == {"A", "B", "pooled"}
        assert all(np.isfinite(r.statistic) for r in out.values())


class TestScoreReport:
    def test_add_and_lookup(self):
        rep = ScoreReport()
        rep.add("copula", "NSW", 1, "crps", 0.5)
        assert rep.value("copula", "NSW", 1, "crps") == 0.5
        with pytest.raises(ValueError):
            rep.add("copula", "NSW", 1, "crps", np.nan)

    def test_system_rows_and_text(self):
        rep = ScoreReport()
        weights = {"A": 0.25, "B": 0.75}
        for series, val in (("A", 1.0), ("B", 2.0)):
            rep.add("m", series, 1, "mae", val)
        rep.add_system_rows(weights)
        assert rep.value("m", "SYSTEM", 1, "mae") == pytest.approx(1.75)
        text = rep.to_text()
        assert "== mae ==" in text
        assert "SYSTEM" in text

    def test_csv_round_trip(self, tmp_path):
        rep = ScoreReport()
        rep.add("m", "A", 1, "rmse", 1.25)
        path = tmp_path / "scores.csv"
        rep.to_csv(path)
        frame = pd.read_csv(path)
        assert frame.value.iloc[0] == 1.25
