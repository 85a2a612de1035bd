"""Deterministic stand-in for a DBMS: data, estimator, planner, executor."""

from .planner import CostModel, OptimizerInterface, SimulatedOptimizer, enumerate_plans
from .schema import (
    CardinalityOracle,
    Column,
    Schema,
    Table,
    estimate_cardinality,
    generate_schema,
    random_template,
    sample_bindings,
    true_cardinality,
)

__all__ = [
    "CardinalityOracle",
    "Column",
    "CostModel",
    "OptimizerInterface",
    "Schema",
    "SimulatedOptimizer",
    "Table",
    "enumerate_plans",
    "estimate_cardinality",
    "generate_schema",
    "random_template",
    "sample_bindings",
    "true_cardinality",
]
