"""Permutation and small-sample inference for the treatment effect in
individual-participant-data meta-analysis.

The package fits the stratified-intercept random-effects linear mixed model
by REML and provides five inference methods for the pooled treatment
effect: Wald-normal, Satterthwaite, Kenward-Roger, a studentized
permutation test with its percentile confidence interval, and a
search-based permutation confidence interval.  A seeded Monte Carlo engine
evaluates all methods over configurable scenario grids.
"""

__version__ = "0.1.0"

from .classical import (
    KENWARD_ROGER,
    NORMAL,
    PERMUTATION,
    PERMUTATION_SEARCH,
    SATTERTHWAITE,
    InferenceResult,
    kenward_roger,
    satterthwaite_ci,
    satterthwaite_df,
    wald_normal,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DfUndefinedError,
    FactorizationError,
    IpdPermError,
    KrAdjustmentError,
    NonIdentifiableError,
    SearchRangeError,
    UnreliableDistributionError,
)
from .model import (
    Covariance,
    DesignMatrices,
    Factor,
    IpdDataset,
    VarianceComponents,
    build_design,
    marginal_covariance,
    upper_triangular_factor,
)
from .permutation import (
    PermutationDraws,
    SearchGrid,
    default_search_grid,
    percentile_ci,
    permutation_distribution,
    permutation_p_value,
    search_ci,
    standardized_residuals,
)
from .reml import FittedModel, fit_reml, restricted_log_likelihood, t_statistic
from .simulation import (
    ScenarioConfig,
    ScenarioMetrics,
    generate_dataset,
    run_scenario,
    sweep,
)

__all__ = [
    "__version__",
    "IpdDataset", "DesignMatrices", "VarianceComponents", "Covariance", "Factor",
    "build_design", "marginal_covariance", "upper_triangular_factor",
    "FittedModel", "fit_reml", "restricted_log_likelihood", "t_statistic",
    "InferenceResult", "wald_normal", "satterthwaite_df", "satterthwaite_ci", "kenward_roger",
    "NORMAL", "SATTERTHWAITE", "KENWARD_ROGER", "PERMUTATION", "PERMUTATION_SEARCH",
    "PermutationDraws", "SearchGrid", "standardized_residuals", "permutation_distribution",
    "permutation_p_value", "percentile_ci", "search_ci", "default_search_grid",
    "ScenarioConfig", "ScenarioMetrics", "generate_dataset", "run_scenario", "sweep",
    "IpdPermError", "DataError", "NonIdentifiableError", "ConvergenceError",
    "FactorizationError", "DfUndefinedError", "KrAdjustmentError",
    "UnreliableDistributionError", "SearchRangeError", "ConfigError",
]
