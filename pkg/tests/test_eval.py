import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import latency_dataset
from pqokit.eval import (
    MetricsReport,
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


def test_oracle_speedup_examples():
    ds, fps = latency_dataset([[10.0, 5.0], [10.0, 12.0]])
    assert oracle_speedup(ds, [fps[1]]) == pytest.approx(20 / 15)
    assert oracle_speedup(ds, []) == 1.0
    assert oracle_speedup(ds, [fps[0]]) == 1.0


def test_missing_default_record_is_an_error():
    from dataclasses import replace

    ds, fps = latency_dataset([[10.0, 5.0]])
    with pytest.raises(ValueError, match="default-plan record"):
        replace(ds, records=tuple(r for r in ds.records if r.plan != fps[0]))


def test_model_speedup_examples():
    ds, fps = latency_dataset([[10.0, 20.0], [10.0, 10.0]])
    assert model_speedup(ds, [None, None]) == 1.0
    assert model_speedup(ds, [fps[1], None]) == pytest.approx(20 / 30)
    with pytest.raises(ValueError):
        model_speedup(ds, [None])


def test_choice_without_record_is_an_error():
    ds, fps = latency_dataset([[10.0, float("nan")]])
    with pytest.raises(KeyError):
        model_speedup(ds, [fps[1]])


def test_oracle_choices_reach_oracle_speedup():
    ds, fps = latency_dataset([[10.0, 5.0, 7.0], [10.0, 12.0, 9.0], [4.0, 8.0, 8.0]])
    ch = oracle_choices(ds, fps[1:])
    assert ch == [fps[1], fps[2], fps[0]]
    assert model_speedup(ds, ch) == oracle_speedup(ds, fps[1:])


def test_nearest_rank_percentile():
    vals = list(range(1, 101))
    assert percentile_nearest_rank(vals, 99) == 99
    assert percentile_nearest_rank(vals, 100) == 100
    assert percentile_nearest_rank([5.0], 99) == 5.0
    assert percentile_nearest_rank([3, 1, 2], 50) == 2
    with pytest.raises(ValueError):
        percentile_nearest_rank([], 99)
    with pytest.raises(ValueError):
        percentile_nearest_rank([1], 0)


def test_tail_speedup_examples():
    lat = np.full((100, 2), 10.0)
    lat[0, 0], lat[0, 1] = 1000.0, 5.0
    lat[1, 0] = 900.0
    ds, fps = latency_dataset(lat)
    assert tail_speedup_p99(ds, [None] * 100) == 1.0
    # nearest-rank p99 of 100 values is the second largest: 900 ms before, 10 ms once both outliers are fixed
    fixed = [fps[1], fps[1]] + [None] * 98
    assert tail_speedup_p99(ds, fixed) == pytest.approx(900 / 10)
    one, f1 = latency_dataset([[8.0, 2.0]])
    assert tail_speedup_p99(one, [f1[1]]) == 4.0


def test_regression_frequency_examples():
    lat = np.full((10, 3), 10.0)
    lat[:, 1] = 10.5
    lat[3, 2] = 15.0
    ds, fps = latency_dataset(lat)
    assert regression_frequency(ds, [None] * 10) == 0.0
    assert regression_frequency(ds, [fps[1]] * 10) == 0.0
    assert regression_frequency(ds, [fps[2]] * 10) == pytest.approx(0.1)


def test_regression_boundary_and_censoring():
    # exactly 10% slower is not a regression; a timeout at the limit proves one
    ds, fps = latency_dataset([[10.0, 11.0]])
    assert not is_regression(ds, 0, fps[1])
    cds, cf = latency_dataset([[10.0, 11.0]], censored=[[False, True]])
    assert is_regression(cds, 0, cf[1])
    cds, cf = latency_dataset([[10.0, 10.5]], censored=[[False, True]])
    assert not is_regression(cds, 0, cf[1])
    assert not is_regression(ds, 0, None)


def test_single_best_plan_ratio_examples():
    ds, _ = latency_dataset([[1.0, 10.0], [10.0, 1.0]])
    assert single_best_plan_ratio(ds) == pytest.approx(2 / 11)
    same, _ = latency_dataset([[3.0, 3.0], [5.0, 5.0]])
    assert single_best_plan_ratio(same) == 1.0
    one, _ = latency_dataset([[3.0], [5.0]])
    assert single_best_plan_ratio(one) == 1.0


def test_single_best_plan_needs_a_complete_plan():
    ds, fps = latency_dataset([[1.0, float("nan")]])
    assert single_best_plan_ratio(ds) == 1.0  # the default is complete
    with pytest.raises(ValueError):
        single_best_plan_ratio(ds, plans=[fps[1]])


def test_geometric_mean():
    assert geometric_mean([2.0, 8.0]) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        geometric_mean([1.0, 0.0])
    with pytest.raises(ValueError):
        geometric_mean([])


def test_evaluate_report_and_csv(tmp_path):
    ds, fps = latency_dataset([[10.0, 5.0], [10.0, 20.0], [10.0, 10.0]])
    rep = evaluate(ds, [fps[1], fps[1], None], [fps[1]], bootstrap=[0, 1, 2])
    assert rep.s_opt == pytest.approx(30 / 25)
    assert rep.s_model == pytest.approx(30 / 35)
    assert rep.capture == pytest.approx(rep.s_model / rep.s_opt)
    assert rep.p_reg == pytest.approx(1 / 3)
    assert rep.n_fallback == 1 and rep.cover_size == 1
    assert sorted(rep.improvements_ms) == [0.0, 5.0] and rep.regressions_ms == [10.0]
    assert rep.single_best_ratio == pytest.approx(25 / 30)
    back = MetricsReport(**json.loads(rep.dumps()))
    assert back == rep
    assert "oracle speedup" in rep.table()
    path = tmp_path / "i.csv"
    write_instance_csv(path, ds, [fps[1], fps[1], None])
    rows = list(csv.DictReader(open(path)))
    assert [r["plan"] for r in rows] == [fps[1], fps[1], "FALLBACK"]
    assert float(rows[1]["improvement_ms"]) == -10.0


# ---------------------------------------------------------------- randomized identities


@st.composite
def latency_matrices(draw, max_n=12, max_k=5):
    n = draw(st.integers(1, max_n))
    k = draw(st.integers(1, max_k))
    vals = draw(st.lists(st.floats(0.01, 1e4), min_size=n * k, max_size=n * k))
    lat = np.array(vals).reshape(n, k)
    holes = draw(st.lists(st.booleans(), min_size=n * k, max_size=n * k))
    mask = np.array(holes).reshape(n, k)
    mask[:, 0] = False
    lat[mask] = np.nan
    return lat


@settings(max_examples=300, deadline=None)
@given(latency_matrices(), st.integers(0, 2**31 - 1))
def test_metric_identities(lat, seed):
    ds, fps = latency_dataset(lat)
    rng = np.random.default_rng(seed)
    plan_set = [p for p in fps if rng.random() < 0.6]
    s_opt = oracle_speedup(ds, plan_set)
    assert s_opt >= 1.0
    assert oracle_speedup(ds, [fps[0]]) == 1.0
    allowed = set(plan_set) | {fps[0]}
    choices = []
    for q in range(len(ds.instances)):
        opts = [None] + [p for p in allowed if ds.record(q, p) is not None]
        choices.append(opts[rng.integers(len(opts))])
    rep = evaluate(ds, choices, plan_set)
    assert rep.s_model <= rep.s_opt
    assert math.isclose(rep.capture * rep.s_opt, rep.s_model, rel_tol=1e-12)
    bigger = set(plan_set) | {p for p in fps if rng.random() < 0.5}
    assert oracle_speedup(ds, bigger) >= s_opt
    assert 0 < single_best_plan_ratio(ds) <= 1.0 + 1e-12


# ---------------------------------------------------------------- exact-cardinality comparison


def test_exact_cardinality_plan_is_best_without_distortion():
    from pqokit.rce import RceParams, workload_candidate_generation
    from pqokit.simdb.scenarios import build_scenario

    sc = build_scenario("random", 3, n_instances=8)
    opt = sc.optimizer()
    cands = workload_candidate_generation(sc.workload, opt, RceParams(generations=2, samples_per_generation=5))
    rows = exact_cardinality_comparison({"q0": opt}, {"q0": cands.plans()}, {"q0": sc.workload})
    (row,) = rows
    assert row["exact_ms"] <= row["best_candidate_ms"] * (1 + 1e-9) or row["n_plans"] == 0
    assert row["exact_ms"] <= row["default_ms"] * (1 + 1e-9)
