"""Probabilistic time-series forecasting with ensemble quadratic echo state
networks: Bayesian readout layers (Gaussian ridge, skew-normal, skew-t) and a
marginally calibrated implicit-copula model, plus rolling-window backtesting
and probabilistic scoring."""

__version__ = "0.1.0"

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
    conditional_loglik,
    copula_predictive_density,
    copula_predictive_draw,
    mcmc_copula,
    psi_scale,
)
from .forecast import (
    FeatureSpec,
    ForecastEnsemble,
    ModelFit,
    advance_fits,
    ensemble_density,
    fit_models,
    load_model_fit,
    make_features,
    predictive_draw_noncopula,
    save_model_fit,
    simulate_paths,
    truncate_to_bounds,
)
from .margins import (
    MarginModel,
    PriceTransform,
    fit_bounded_kde,
    inverse_transform_price,
    margin_cdf,
    margin_pdf,
    margin_quantile,
    to_normal_scores,
    transform_price,
)
from .panel import PanelSchema, TimeSeriesPanel, load_panel, save_panel
from .pipeline import (
    BacktestConfig,
    BacktestResult,
    config_from_ini,
    config_to_ini,
    run_backtest,
    write_config_template,
)
from .reservoir import (
    DesignMatrix,
    HiddenStatePath,
    ReservoirConfig,
    ReservoirWeights,
    build_design,
    run_hidden_states,
    sample_weights,
    spectral_radius,
)
from .scoring import (
    CalibrationCurves,
    ScoreReport,
    crps,
    dm_test,
    dm_test_panel,
    interval_coverage,
    marginal_calibration,
    point_errors,
    quantile_score,
    system_weighted,
    upper_tail_loss,
)
from .synthetic import SynthSpec, SynthTruth, generate, make_demand_quantile_columns
