"""Balancing weights for treatment effect estimation in clustered data."""

from .data import (
    ColumnSchema,
    Dataset,
    ClusterFilterReport,
    Unit,
    filter_degenerate_clusters,
    load_csv,
    write_csv,
)
from .features import (
    FeatureSet,
    FeatureSpec,
    FeatureTerm,
    build_cluster_stats,
    build_feature_set,
    build_interactions,
    build_unit_features,
    default_feature_spec,
)
from .qp import ObjectiveBlock, QpProblem, QpSolution, SolveOptions, check_kkt, solve
from .estimators import (
    BalanceModelClass,
    HierarchicalBalancingWeights,
    METHODS,
    MundlakBalancingWeights,
    RandomInterceptIPW,
    StandardBalancingWeights,
    WeightSolution,
    make_estimator,
    select_ridge_penalty,
    worst_case_bias_bound,
)
from .diagnostics import BalanceReport, balance_report, ess, l2_aggregate, pbr, smd
from .inference import (
    EffectEstimate,
    att_estimate,
    bias_corrected_mu0,
    confidence_interval,
    estimate_effect,
    fit_outcome_model,
    rve_variance,
)
from .simulation import SimConfig, SimResult, SimTruth, generate, run_monte_carlo

__all__ = [
    "BalanceModelClass",
    "HierarchicalBalancingWeights",
    "METHODS",
    "MundlakBalancingWeights",
    "RandomInterceptIPW",
    "StandardBalancingWeights",
    "WeightSolution",
    "make_estimator",
    "select_ridge_penalty",
    "worst_case_bias_bound",
    "BalanceReport",
    "balance_report",
    "ess",
    "l2_aggregate",
    "pbr",
    "smd",
    "EffectEstimate",
    "att_estimate",
    "bias_corrected_mu0",
    "confidence_interval",
    "estimate_effect",
    "fit_outcome_model",
    "rve_variance",
    "SimConfig",
    "SimResult",
    "SimTruth",
    "generate",
    "run_monte_carlo",
    "ColumnSchema",
    "Dataset",
    "ClusterFilterReport",
    "Unit",
    "filter_degenerate_clusters",
    "load_csv",
    "write_csv",
    "FeatureSet",
    "FeatureSpec",
    "FeatureTerm",
    "build_cluster_stats",
    "build_feature_set",
    "build_interactions",
    "build_unit_features",
    "default_feature_spec",
    "ObjectiveBlock",
    "QpProblem",
    "QpSolution",
    "SolveOptions",
    "check_kkt",
    "solve",
]
