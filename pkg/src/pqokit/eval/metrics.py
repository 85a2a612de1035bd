"""Workload-level speedup, tail and regression metrics.

A choice is a plan fingerprint, ``None`` (use the default plan), or any
object with a ``plan`` attribute holding one of those.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..core import ExecutionDataset, PlanTree, Workload, estimated_latency, plan_fingerprint


def _instances(dataset: ExecutionDataset, instances: Sequence[int] | None) -> list[int]:
    return list(range(len(dataset.instances))) if instances is None else list(instances)


def _choice_fp(choice) -> str | None:
    return getattr(choice, "plan", choice)


def _default(dataset: ExecutionDataset, q: int) -> float:
    rec = dataset.record(q, dataset.default_plans[q])
    if rec is None:
        raise KeyError(f"instance {q} has no default-plan record")
    return estimated_latency(rec)


def chosen_latency(dataset: ExecutionDataset, q: int, choice) -> float:
    """Latency of the chosen plan; fallback means the default. Censored runs count at their timeout."""
    fp = _choice_fp(choice)
    if fp is None:
        return _default(dataset, q)
    rec = dataset.record(q, fp)
    if rec is None:
        raise KeyError(f"no record of plan {fp} on instance {q}")
    return estimated_latency(rec)


def best_latency(dataset: ExecutionDataset, q: int, plan_set: Iterable[str]) -> float:
    best = _default(dataset, q)
    for fp in plan_set:
        rec = dataset.record(q, fp)
        if rec is not None:
            best = min(best, estimated_latency(rec))
    return best


def oracle_speedup(dataset: ExecutionDataset, plan_set: Iterable[str], instances: Sequence[int] | None = None) -> float:
    """Total default latency over total per-instance best latency within ``plan_set`` plus the default."""
    qs = _instances(dataset, instances)
    plans = list(plan_set)
    return sum(_default(dataset, q) for q in qs) / sum(best_latency(dataset, q, plans) for q in qs)


def oracle_choices(dataset: ExecutionDataset, plan_set: Iterable[str], instances: Sequence[int] | None = None) -> list[str]:
    """Per-instance fastest plan within ``plan_set`` plus the default."""
    plans = list(plan_set)
    out = []
    for q in _instances(dataset, instances):
        cands = [dataset.default_plans[q]] + [p for p in plans if dataset.record(q, p) is not None]
        out.append(min(cands, key=lambda p: (estimated_latency(dataset.record(q, p)), p)))
    return out


def model_speedup(dataset: ExecutionDataset, choices: Sequence, instances: Sequence[int] | None = None) -> float:
    qs = _instances(dataset, instances)
    _check_len(qs, choices)
    return sum(_default(dataset, q) for q in qs) / sum(chosen_latency(dataset, q, c) for q, c in zip(qs, choices))


def percentile_nearest_rank(values: Sequence[float], pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    if not values:
        raise ValueError("empty collection")
    if not 0 < pct <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def tail_speedup_p99(dataset: ExecutionDataset, choices: Sequence, instances: Sequence[int] | None = None) -> float:
    qs = _instances(dataset, instances)
    _check_len(qs, choices)
    d = [_default(dataset, q) for q in qs]
    c = [chosen_latency(dataset, q, ch) for q, ch in zip(qs, choices)]
    return percentile_nearest_rank(d, 99) / percentile_nearest_rank(c, 99)


def regression_frequency(
    dataset: ExecutionDataset, choices: Sequence, instances: Sequence[int] | None = None, threshold: float = 0.10
) -> float:
    """Fraction of instances whose chosen plan is more than ``threshold`` slower than the default."""
    qs = _instances(dataset, instances)
    _check_len(qs, choices)
    if not qs:
        return 0.0
    return sum(1 for q, ch in zip(qs, choices) if is_regression(dataset, q, ch, threshold)) / len(qs)


def is_regression(dataset: ExecutionDataset, q: int, choice, threshold: float = 0.10) -> bool:
    """Chosen plan more than ``threshold`` slower than the default; never true for a fallback.

    A censored record's true latency lies strictly above its timeout, so a
    timeout at or beyond the threshold already proves a regression.
    """
    fp = _choice_fp(choice)
    if fp is None:
        return False
    limit = (1.0 + threshold) * _default(dataset, q)
    rec = dataset.record(q, fp)
    if rec is None:
        raise KeyError(f"no record of plan {fp} on instance {q}")
    lat = estimated_latency(rec)
    return lat > limit or (rec.censored and lat >= limit)


def single_best_plan_ratio(dataset: ExecutionDataset, instances: Sequence[int] | None = None, plans: Sequence[str] | None = None) -> float:
    """Total of per-instance minima over the total of the best single fixed plan.

    Only plans recorded on every instance compete as the fixed plan.
    """
    qs = _instances(dataset, instances)
    pool = list(plans) if plans is not None else sorted(dataset.plans)
    complete = [p for p in pool if all(dataset.record(q, p) is not None for q in qs)]
    if not complete:
        raise ValueError("no plan was executed on every instance")
    lat = np.array([[estimated_latency(dataset.record(q, p)) for p in complete] for q in qs])
    return float(lat.min(axis=1).sum() / lat.sum(axis=0).min())


def geometric_mean(values: Iterable[float]) -> float:
    vals = [float(v) for v in values]
    if not vals or any(v <= 0 for v in vals):
        raise ValueError("geometric mean needs positive values")
    return float(math.exp(sum(math.log(v) for v in vals) / len(vals)))


def _check_len(qs, choices):
    if len(qs) != len(choices):
        raise ValueError(f"{len(choices)} choices for {len(qs)} instances")


# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    s_opt: float
    s_model: float
    capture: float
    p99: float
    p_reg: float
    cover_size: int
    single_best_ratio: float | None
    n_instances: int
    n_fallback: int
    improvements_ms: list[float] = field(default_factory=list)
    regressions_ms: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def table(self) -> str:
        rows = [
            ("instances", str(self.n_instances)),
            ("plan cover size", str(self.cover_size)),
            ("oracle speedup", f"{self.s_opt:.4f}"),
            ("model speedup", f"{self.s_model:.4f}"),
            ("capture fraction", f"{self.capture:.4f}"),
            ("p99 speedup", f"{self.p99:.4f}"),
            ("regression frequency", f"{self.p_reg:.4f}"),
            ("fallbacks", str(self.n_fallback)),
        ]
        if self.single_best_ratio is not None:
            rows.append(("single-best-plan ratio", f"{self.single_best_ratio:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def evaluate(
    dataset: ExecutionDataset,
    choices: Sequence,
    cover: Sequence[str],
    instances: Sequence[int] | None = None,
    bootstrap: Sequence[int] | None = None,
    regression_threshold: float = 0.10,
) -> MetricsReport:
    qs = _instances(dataset, instances)
    _check_len(qs, choices)
    s_opt = oracle_speedup(dataset, cover, qs)
    s_model = model_speedup(dataset, choices, qs)
    improvements, regressions = [], []
    for q, ch in zip(qs, choices):
        delta = _default(dataset, q) - chosen_latency(dataset, q, ch)
        (improvements if delta >= 0 else regressions).append(abs(delta))
    sbr = None
    if bootstrap:
        try:
            sbr = single_best_plan_ratio(dataset, bootstrap)
        except ValueError:
            sbr = None
    return MetricsReport(
        s_opt=s_opt,
        s_model=s_model,
        capture=s_model / s_opt,
        p99=tail_speedup_p99(dataset, choices, qs),
        p_reg=regression_frequency(dataset, choices, qs, regression_threshold),
        cover_size=len(cover),
        single_best_ratio=sbr,
        n_instances=len(qs),
        n_fallback=sum(1 for ch in choices if _choice_fp(ch) is None),
        improvements_ms=improvements,
        regressions_ms=regressions,
    )


def write_instance_csv(path: str | Path, dataset: ExecutionDataset, choices: Sequence, instances: Sequence[int] | None = None) -> None:
    """Per-instance default and chosen latency with the signed improvement."""
    qs = _instances(dataset, instances)
    _check_len(qs, choices)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["instance", "plan", "default_ms", "chosen_ms", "improvement_ms"])
        for q, ch in zip(qs, choices):
            d, c = _default(dataset, q), chosen_latency(dataset, q, ch)
            out.writerow([q, _choice_fp(ch) or "FALLBACK", repr(d), repr(c), repr(d - c)])


# ---------------------------------------------------------------------------


def exact_cardinality_comparison(optimizers: Mapping[str, object], candidates: Mapping[str, Mapping[str, PlanTree]], workloads: Mapping[str, Workload]) -> list[dict]:
    """Noiseless total latency of the best candidate, exact-cardinality and default plans per template.

    ``optimizers`` must expose ``plan``, ``exact_plan`` and ``true_latency``
    (the simulator does).
    """
    rows = []
    for tid in sorted(optimizers):
        opt = optimizers[tid]
        plans = list(candidates[tid].values())
        rce = exact = default = 0.0
        for q in workloads[tid].instances:
            rce += min(opt.true_latency(p, q) for p in plans)
            exact += opt.true_latency(opt.exact_plan(q), q)
            default += opt.true_latency(opt.plan(q, {}), q)
        rows.append({"template": tid, "best_candidate_ms": rce, "exact_ms": exact, "default_ms": default, "n_plans": len(plans)})
    return rows


def plans_by_fingerprint(plans: Iterable[PlanTree]) -> dict[str, PlanTree]:
    return {plan_fingerprint(p): p for p in plans}
