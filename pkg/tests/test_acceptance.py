"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and immediately with ``-s``) before asserting.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import latency_dataset, record_criterion
from pqokit.collect import CollectionPolicy, collect_training_data, compute_plan_cover
from pqokit.core import (
    Join,
    Scan,
    SubPlanKey,
    export_dataset,
    import_dataset,
    plan_fingerprint,
    split_indices,
)
from pqokit.eval import evaluate, exact_cardinality_comparison, model_speedup, oracle_speedup, regression_frequency
from pqokit.learn import ModelArtifact, TrainConfig, train_model
from pqokit.pipeline import EXIT_OK, PipelineConfig, run_pipeline
from pqokit.rce import RceParams, RowCountMap, instance_rng, perturbation_candidates, row_count_evolution, sample_perturbations, workload_candidate_generation
from pqokit.simdb import estimate_cardinality, true_cardinality
from pqokit.simdb.scenarios import build_scenario

ROOT = Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------- 1


def test_c01_rce_recovers_exact_cardinality_plan():
    t0 = time.perf_counter()
    hits, differs = 0, 0
    for seed in range(10):
        sc = build_scenario("adversarial", seed)
        opt = sc.optimizer()
        q = sc.workload.instances[0]
        tables = opt.template.tables
        # the scenario really fools the estimator: one join underestimated at least 100x, no distortion
        key = SubPlanKey.of(("r", "s"))
        assert true_cardinality(sc.schema, opt.template, q, key) >= 100 * estimate_cardinality(sc.schema, opt.template, q, key)
        assert all(v == 1.0 for v in sc.cost_model.distortion.values())
        params = RceParams(seed=seed)
        cands = row_count_evolution(q, opt, params, instance_rng(params, 0))
        exact = plan_fingerprint(opt.exact_plan(q), tables)
        hits += exact in cands
        differs += exact != plan_fingerprint(opt.plan(q, RowCountMap()), tables)
    elapsed = time.perf_counter() - t0
    ok = hits >= 9 and elapsed < 30
    record_criterion(1, "RCE recovery", ok, f"exact plan found for {hits}/10 seeds ({differs} where it differs from the default) in {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_c02_perturbation_grid_matches_worked_example():
    # two join sub-plans whose optimizer estimates are 40 and 17 rows
    ab = Join("HashJoin", Scan("a", "SeqScan"), Scan("b", "SeqScan"), 40)
    cd = Join("HashJoin", Scan("c", "SeqScan"), Scan("d", "SeqScan"), 17)
    plan = Join("HashJoin", ab, cd, 1000)
    params = RceParams(exponent_base=10.0, exponent_range=1)
    rng = np.random.default_rng(0)
    keys = {40: SubPlanKey.of("ab"), 17: SubPlanKey.of("cd")}
    seen = {w: set() for w in keys}
    for _ in range(400):
        r = sample_perturbations(plan, RowCountMap(), params, rng)
        for w, k in keys.items():
            seen[w].add(r[k])
    grid = {w: perturbation_candidates(w, 10.0, 1) for w in keys}
    ok = grid[40] == [4, 40, 400] and grid[17] == [1, 17, 170] and seen == {w: set(g) for w, g in grid.items()}
    record_criterion(2, "perturbation grid", ok, f"40 -> {sorted(seen[40])}, 17 -> {sorted(seen[17])}")
    assert ok


# ---------------------------------------------------------------- 3


def brute_force_cover_size(sets, universe, delta):
    need = math.ceil((1.0 - delta) * len(universe) - 1e-9)
    keys = sorted(sets)
    for size in range(0, len(keys) + 1):
        for combo in itertools.combinations(keys, size):
            if len(set().union(*(sets[k] for k in combo))) >= need:
                return size
    raise AssertionError("no cover exists")


def test_c03_greedy_cover_against_exhaustive_search():
    from pqokit.collect import near_optimal_sets

    rng = np.random.default_rng(2024)
    h12 = sum(1.0 / i for i in range(1, 13))
    exact = coverage_ok = bound_ok = 0
    trials = 200
    for _ in range(trials):
        n = int(rng.integers(1, 13))
        k = int(rng.integers(1, 11))
        lat = np.exp(rng.normal(0.0, 1.0, (n, k)))
        eps = float(rng.choice([0.05, 0.2, 0.5, 1.0]))
        delta = float(rng.choice([0.0, 0.1, 0.25]))
        ds, fps = latency_dataset(lat)
        universe = list(range(n))
        cover = compute_plan_cover(ds, universe, fps, eps, delta)
        opt = brute_force_cover_size(near_optimal_sets(ds, universe, fps, eps), universe, delta)
        coverage_ok += cover.coverage >= 1 - delta - 1e-12
        bound_ok += len(cover) <= h12 * opt
        exact += len(cover) == opt
    ok = coverage_ok == trials and bound_ok == trials and exact >= 0.8 * trials
    record_criterion(
        3, "plan cover", ok, f"coverage {coverage_ok}/{trials}, H(12) bound {bound_ok}/{trials}, optimal size {exact}/{trials}"
    )
    assert ok


# ---------------------------------------------------------------- 4 and 5


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    cfg = PipelineConfig.load(ROOT / "configs" / "demo.json")
    t0 = time.perf_counter()
    status = run_pipeline(cfg, out)
    return cfg, out, status, time.perf_counter() - t0


def test_c04_end_to_end_speedup_capture(demo_run):
    cfg, out, status, elapsed = demo_run
    assert status == EXIT_OK
    assert cfg.scenario == "param_sensitive" and cfg.model.threshold == 0.9
    m = json.loads((out / "metrics.json").read_text())
    ok = m["s_model"] >= 0.9 * m["s_opt"] and m["p_reg"] <= 0.01 and m["s_opt"] >= 1.5 and elapsed < 300
    record_criterion(
        4,
        "speedup capture",
        ok,
        f"S_opt {m['s_opt']:.3f}, S_model {m['s_model']:.3f} (capture {m['capture']:.3f}), P_reg {m['p_reg']:.3f}, "
        f"{m['n_instances']} test instances, pipeline {elapsed:.0f}s",
    )
    assert ok


def test_c05_threshold_sweep(demo_run):
    cfg, out, status, _ = demo_run
    assert status == EXIT_OK
    ds = import_dataset(out / "dataset.jsonl")
    model = ModelArtifact.load(out / "model.json")
    _, test = split_indices(len(ds.instances), cfg.train_fraction, cfg.seed)
    qs = [ds.instances[q] for q in test]
    counts, speedups = [], []
    for t in (0.0, 0.25, 0.5, 0.75, 0.9, 1.0):
        choices = model.predict(qs, t)
        counts.append(round(regression_frequency(ds, choices, test) * len(test)))
        speedups.append(model_speedup(ds, choices, test))
    ok = all(b <= a for a, b in zip(counts, counts[1:])) and speedups[-1] == 1.0
    record_criterion(5, "threshold sweep", ok, f"regressions {counts}, S_model {[round(s, 3) for s in speedups]}")
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_out_of_distribution_slice():
    seed = 0
    sc = build_scenario("ood", seed)
    opt = sc.optimizer()
    cands = workload_candidate_generation(sc.workload, opt, RceParams(seed=seed))
    ds, cover, _ = collect_training_data(sc.workload, cands, opt, CollectionPolicy(seed=seed))
    slot, cut = sc.info["slot"], sc.info["holdout_from"]
    held = [q for q, inst in enumerate(ds.instances) if inst.bindings[slot] >= cut]
    inside = [q for q, inst in enumerate(ds.instances) if inst.bindings[slot] < cut]
    perm = np.random.default_rng(seed).permutation(inside)
    n_train = int(0.8 * len(inside))
    train, test = sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())
    model = train_model(ds, cover.plans, TrainConfig(), seed, train)

    def mean_conf(qs):
        return float(model.scores([ds.instances[q] for q in qs])[2].max(axis=1).mean())

    c_in, c_out = mean_conf(test), mean_conf(held)
    held_q = [ds.instances[q] for q in held]
    reg_off = regression_frequency(ds, model.predict(held_q, 0.0), held)
    reg_on = regression_frequency(ds, model.predict(held_q, 0.9), held)
    reduced = reg_off > 0 and (reg_on == 0 or reg_off / reg_on >= 5)
    ok = c_out < c_in and reduced
    ratio = "inf" if reg_on == 0 else f"{reg_off / reg_on:.1f}x"
    record_criterion(
        6,
        "OOD detection",
        ok,
        f"mean confidence {c_in:.3f} in range vs {c_out:.3f} held out; held-out P_reg {reg_off:.3f} -> {reg_on:.3f} with fallback ({ratio})",
    )
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_gradients_and_spectral_bound():
    from test_learn import _two_cluster, max_relative_gradient_error

    grad_err = max(max_relative_gradient_error(seed) for seed in range(100, 120))
    ds, fps = _two_cluster()
    cfg = TrainConfig(epochs=60)
    worst = {"estimate": 0.0, "svd": 0.0, "steps": 0}

    def watch(params, est):
        worst["steps"] += 1
        worst["estimate"] = max(worst["estimate"], max(est))
        worst["svd"] = max(worst["svd"], max(float(np.linalg.norm(params[f"W{k}"], 2)) for k in range(1, cfg.layers + 1)))

    train_model(ds, fps, cfg, 0, on_step=watch)
    limit = cfg.spectral_bound * 1.01
    ok = grad_err <= 1e-4 and worst["estimate"] <= limit
    record_criterion(
        7,
        "gradient and spectral bound",
        ok,
        f"max relative gradient error {grad_err:.2e} over 20 nets; over {worst['steps']} steps max estimate "
        f"{worst['estimate']:.4f}, max exact singular value {worst['svd']:.4f} (limit {limit:.4f})",
    )
    assert ok
    assert worst["svd"] <= limit


# ---------------------------------------------------------------- 8


def test_c08_metric_identities_on_random_datasets():
    rng = np.random.default_rng(8)
    bad = {"unit": 0, "identity": 0, "order": 0}
    worst_rel = 0.0
    for _ in range(1000):
        n, k = int(rng.integers(1, 15)), int(rng.integers(1, 6))
        lat = np.exp(rng.normal(2.0, 1.5, (n, k)))
        holes = rng.random((n, k)) < 0.2
        holes[:, 0] = False
        lat[holes] = np.nan
        ds, fps = latency_dataset(lat)
        plan_set = [p for p in fps[1:] if rng.random() < 0.7]
        allowed = [fps[0]] + plan_set
        choices = []
        for q in range(n):
            opts = [None] + [p for p in allowed if ds.record(q, p) is not None]
            choices.append(opts[int(rng.integers(len(opts)))])
        rep = evaluate(ds, choices, plan_set)
        bad["unit"] += oracle_speedup(ds, [fps[0]]) != 1.0
        rel = abs(rep.capture * rep.s_opt - rep.s_model) / rep.s_model
        worst_rel = max(worst_rel, rel)
        bad["identity"] += rel > 1e-12
        bad["order"] += rep.s_model > rep.s_opt
    ok = not any(bad.values())
    record_criterion(8, "metric identities", ok, f"violations {bad} over 1000 datasets; worst identity error {worst_rel:.1e}")
    assert ok


# ---------------------------------------------------------------- 9


def test_c09_exact_cardinality_plans_can_lose():
    per_seed = {}
    for seed in range(3):
        sc = build_scenario("distorted", seed)
        opts = {t: sc.optimizer(t) for t in sc.templates}
        cands = {t: workload_candidate_generation(sc.workloads[t], opts[t], RceParams(seed=seed)).plans() for t in sc.templates}
        rows = exact_cardinality_comparison(opts, cands, sc.workloads)
        per_seed[seed] = [r["template"] for r in rows if r["best_candidate_ms"] < r["exact_ms"]]
    ok = any(per_seed.values())
    detail = "; ".join(f"seed {s}: {v or 'none'}" for s, v in per_seed.items())
    record_criterion(9, "exact-cardinality suboptimality", ok, f"templates where the best candidate beats the exact plan: {detail}")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_tail_reordering_saves_executions():
    seed = 0
    sc = build_scenario("heavy_tailed", seed)
    opt = sc.optimizer()
    cands = workload_candidate_generation(sc.workload, opt, RceParams(seed=seed))
    runs = {}
    for reorder in (True, False):
        _, cover, stats = collect_training_data(sc.workload, cands, opt, CollectionPolicy(seed=seed, tail_reorder=reorder))
        runs[reorder] = (stats.executions, len(cover))
    ok = runs[True][0] <= runs[False][0]
    record_criterion(
        10,
        "tail reordering economy",
        ok,
        f"{runs[True][0]} executions with reordering (cover {runs[True][1]}) vs {runs[False][0]} without (cover {runs[False][1]})",
    )
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_determinism_and_round_trip(tmp_path):
    from test_pipeline import SMALL

    cfg = PipelineConfig.from_json(SMALL)
    for name in ("a", "b"):
        assert run_pipeline(cfg, tmp_path / name) == EXIT_OK
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("dataset.jsonl", "metrics.json")}
    ds = import_dataset(tmp_path / "a" / "dataset.jsonl")
    export_dataset(ds, tmp_path / "again.jsonl")
    back = import_dataset(tmp_path / "again.jsonl")
    round_trip = back == ds and (tmp_path / "again.jsonl").read_bytes() == (tmp_path / "a" / "dataset.jsonl").read_bytes()
    ok = all(same.values()) and round_trip
    record_criterion(11, "determinism and round trip", ok, f"byte-identical reruns {same}, export/import identity {round_trip}")
    assert ok
