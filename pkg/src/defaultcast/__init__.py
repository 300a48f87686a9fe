"""Multiperiod corporate default risk forecasting with calibrated uncertainty.

The pipeline has four stages, each usable on its own:

1. :class:`CompetingRisksHazard` fits log-linear monthly intensities for
   default and other market exit by maximum likelihood.
2. :class:`CovariateDynamics` fits the covariate process (a structured
   mean-reverting vector autoregression whose innovations carry a low-rank
   dynamic factor structure) by EM with a missing-data Kalman smoother.
3. :func:`forecast_default_probabilities` turns both fits into per-firm
   multiperiod default probabilities by Monte Carlo, and into expected
   aggregate default counts over the risk set.
4. :mod:`defaultcast.poisson_binomial` and :mod:`defaultcast.uncertainty`
   quantify forecast uncertainty: exact count distributions, plug-in
   intervals, and bootstrap-calibrated intervals that propagate the default
   mechanism, the covariate dynamics, and parameter estimation error.
"""

__version__ = "0.1.0"

from .dynamics import (
    CovariateDynamics,
    DynamicsParams,
    FactorPath,
    assemble_theta,
    kalman_filter_smoother,
    simulate_future,
    simulate_future_paths,
    simulate_historical,
    var_residuals,
)
from .evaluation import (
    LogisticFit,
    RocCurve,
    SyntheticScenario,
    coverage_study,
    generate_scenario,
    logistic_interaction,
    power_curve,
)
from .forecast import (
    DefaultRiskForecaster,
    FirmForecast,
    ForecastResult,
    forecast_default_probabilities,
    path_default_probability,
    risk_set_from_events,
)
from .hazard import (
    CompetingRisksHazard,
    cumulative_intensity,
    intensity,
    log_likelihood,
    wald_interval,
)
from .panel import (
    CENSORED,
    DEFAULT,
    OTHER_EXIT,
    DifferencedPanel,
    EventRecord,
    FirmPanel,
    difference_order3,
    invert_difference,
    load_panel,
    reconstruct_levels,
)
from .poisson_binomial import CountDistribution, naive_pi, pb_cdf, sample_count
from .uncertainty import (
    BootstrapReplicate,
    PredictionInterval,
    aggregate_pi,
    draw_hazard_params,
    individual_pi,
    naive_aggregate_pi,
    order_statistic_interval,
    replicate_engine,
)

__all__ = [
    "__version__",
    "CENSORED",
    "DEFAULT",
    "OTHER_EXIT",
    "BootstrapReplicate",
    "CompetingRisksHazard",
    "CountDistribution",
    "CovariateDynamics",
    "DefaultRiskForecaster",
    "DifferencedPanel",
    "DynamicsParams",
    "EventRecord",
    "FactorPath",
    "FirmForecast",
    "FirmPanel",
    "ForecastResult",
    "LogisticFit",
    "PredictionInterval",
    "RocCurve",
    "SyntheticScenario",
    "aggregate_pi",
    "assemble_theta",
    "coverage_study",
    "cumulative_intensity",
    "difference_order3",
    "draw_hazard_params",
    "forecast_default_probabilities",
    "generate_scenario",
    "individual_pi",
    "intensity",
    "invert_difference",
    "kalman_filter_smoother",
    "load_panel",
    "log_likelihood",
    "logistic_interaction",
    "naive_aggregate_pi",
    "naive_pi",
    "order_statistic_interval",
    "path_default_probability",
    "pb_cdf",
    "power_curve",
    "reconstruct_levels",
    "replicate_engine",
    "risk_set_from_events",
    "sample_count",
    "simulate_future",
    "simulate_future_paths",
    "simulate_historical",
    "var_residuals",
    "wald_interval",
]
