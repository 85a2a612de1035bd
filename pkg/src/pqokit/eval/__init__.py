"""Evaluation metrics."""

from .metrics import (
    MetricsReport,
    best_latency,
    chosen_latency,
    evaluate,
    exact_cardinality_comparison,
    geometric_mean,
    is_regression,
    model_speedup,
    oracle_choices,
    oracle_speedup,
    percentile_nearest_rank,
    regression_frequency,
    single_best_plan_ratio,
    tail_speedup_p99,
    write_instance_csv,
)

__all__ = [
    "MetricsReport",
    "best_latency",
    "chosen_latency",
    "evaluate",
    "exact_cardinality_comparison",
    "geometric_mean",
    "is_regression",
    "model_speedup",
    "oracle_choices",
    "oracle_speedup",
    "percentile_nearest_rank",
    "regression_frequency",
    "single_best_plan_ratio",
    "tail_speedup_p99",
    "write_instance_csv",
]
