"""Training-data collection with adaptive timeouts and plan-cover pruning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .core import (
    ExecutionDataset,
    ExecutionRecord,
    PlanTree,
    QueryInstance,
    Workload,
    estimated_latency,
    plan_fingerprint,
)
from .rce import CandidateSet, RowCountMap
from .simdb.planner import OptimizerInterface

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CollectionPolicy:
    repeats: int = 3
    timeout_slack: float = 1.1
    plan_cover_epsilon: float = 0.2
    plan_cover_delta: float = 0.01
    bootstrap_instances: int = 100
    tail_reorder: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.timeout_slack > 1:
            raise ValueError("timeout_slack must be > 1")
        if not self.plan_cover_epsilon > 0:
            raise ValueError("plan_cover_epsilon must be > 0")
        if not 0 <= self.plan_cover_delta < 1:
            raise ValueError("plan_cover_delta must lie in [0, 1)")
        if self.bootstrap_instances < 1:
            raise ValueError("bootstrap_instances must be >= 1")

    @classmethod
    def from_json(cls, d: Mapping) -> CollectionPolicy:
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


class CoverError(ValueError):
    """Requested coverage cannot be reached."""

    def __init__(self, uncovered: Sequence[int]):
        self.uncovered = list(uncovered)
        super().__init__(f"coverage unreachable; uncovered instances: {self.uncovered}")


@dataclass(frozen=True)
class PlanCover:
    plans: tuple[str, ...]  # greedy pick order
    coverage: float
    covered: dict[str, tuple[int, ...]]  # plan -> bootstrap instances it is near-optimal for
    epsilon: float
    delta: float
    n_bootstrap: int

    def __len__(self) -> int:
        return len(self.plans)

    def to_json(self) -> dict:
        return {
            "plans": list(self.plans),
            "coverage": self.coverage,
            "covered": {k: list(v) for k, v in self.covered.items()},
            "epsilon": self.epsilon,
            "delta": self.delta,
            "n_bootstrap": self.n_bootstrap,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> PlanCover:
        return cls(
            tuple(d["plans"]),
            float(d["coverage"]),
            {k: tuple(v) for k, v in d["covered"].items()},
            float(d["epsilon"]),
            float(d["delta"]),
            int(d["n_bootstrap"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PlanCover:
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# ordering


def tail_order(default_latencies: Sequence[float]) -> list[int]:
    """Indices by descending latency; ties keep their original order."""
    return sorted(range(len(default_latencies)), key=lambda i: -default_latencies[i])


def tail_reorder(w: Workload, default_latencies: Sequence[float]) -> Workload:
    if len(default_latencies) != len(w):
        raise ValueError(f"{len(default_latencies)} latencies for {len(w)} instances")
    return w.subset(tail_order(default_latencies))


class History:
    """Running mean of each plan's estimated latency across instances."""

    def __init__(self):
        self._sum: dict[str, float] = {}
        self._n: dict[str, int] = {}

    def update(self, plan: str, latency: float) -> None:
        self._sum[plan] = self._sum.get(plan, 0.0) + latency
        self._n[plan] = self._n.get(plan, 0) + 1

    def mean(self, plan: str) -> float | None:
        n = self._n.get(plan)
        return None if not n else self._sum[plan] / n

    def order(self, plans: Sequence[str]) -> list[str]:
        """Ascending historical latency; unseen plans last; ties by fingerprint."""

        def key(fp):
            m = self.mean(fp)
            return (m is None, m if m is not None else 0.0, fp)

        return sorted(plans, key=key)


# ---------------------------------------------------------------------------
# execution


@dataclass
class CollectStats:
    """Actual plan runs (including ones cut short by a timeout) and their simulated time."""

    executions: int = 0
    censored_records: int = 0
    simulated_ms: float = 0.0
    failures: int = 0
    per_phase: dict = field(default_factory=dict)

    def add_runs(self, completed: Sequence[float], timed_out: int, timeout: float | None) -> None:
        self.executions += len(completed) + timed_out
        self.simulated_ms += sum(completed) + timed_out * (timeout or 0.0)


def _run_plan(
    plan: PlanTree,
    instance: QueryInstance,
    index: int,
    executor: OptimizerInterface,
    policy: CollectionPolicy,
    best: float | None,
    stats: CollectStats,
) -> ExecutionRecord:
    """First repeat untimed, later repeats under ``slack * best``."""
    first = executor.execute(plan, instance, None, 1, policy.seed, index, 0)
    stats.add_runs(first.latencies_ms, 0, None)
    if policy.repeats == 1:
        return first
    n_rest = policy.repeats - 1
    if best is None:
        rest = executor.execute(plan, instance, None, n_rest, policy.seed, index, 1)
        stats.add_runs(rest.latencies_ms, 0, None)
        return ExecutionRecord(index, first.plan, first.latencies_ms + rest.latencies_ms)
    timeout = policy.timeout_slack * best
    rest = executor.execute(plan, instance, timeout, n_rest, policy.seed, index, 1)
    if rest.censored:
        stats.add_runs((), 1, timeout)
        if first.latencies_ms[0] >= timeout:
            stats.censored_records += 1
            return ExecutionRecord(index, first.plan, (first.latencies_ms[0], timeout), censored=True, timeout_ms=timeout)
        return ExecutionRecord(index, first.plan, first.latencies_ms, timeout_ms=timeout)
    stats.add_runs(rest.latencies_ms, int(len(rest.latencies_ms) < n_rest), timeout)
    return ExecutionRecord(index, first.plan, first.latencies_ms + rest.latencies_ms, timeout_ms=timeout)


def collect_instance(
    instance: QueryInstance,
    index: int,
    plans: Mapping[str, PlanTree],
    default: str,
    executor: OptimizerInterface,
    policy: CollectionPolicy,
    history: History,
    default_record: ExecutionRecord | None = None,
    stats: CollectStats | None = None,
) -> list[ExecutionRecord]:
    """Execute the default plan, then the others in historical-latency order."""
    if default not in plans:
        raise ValueError("default plan must be among the plans")
    stats = stats if stats is not None else CollectStats()
    records = []
    if default_record is None:
        default_record = _run_plan(plans[default], instance, index, executor, policy, None, stats)
    records.append(default_record)
    best = estimated_latency(default_record)
    history.update(default, best)
    for fp in history.order([p for p in plans if p != default]):
        try:
            rec = _run_plan(plans[fp], instance, index, executor, policy, best, stats)
        except Exception as exc:  # one failing plan must not abort the instance
            log.warning("execution of plan %s on instance %d failed: %s", fp, index, exc)
            stats.failures += 1
            continue
        records.append(rec)
        lat = estimated_latency(rec)
        history.update(fp, lat)
        if not rec.censored:
            best = min(best, lat)
    return records


# ---------------------------------------------------------------------------
# plan cover


def greedy_set_cover(sets: Mapping[str, frozenset[int]], universe: Sequence[int], delta: float) -> tuple[list[str], set[int]]:
    """Greedy cover of at least ``(1 - delta)`` of ``universe``; ties by key."""
    need = math.ceil((1.0 - delta) * len(universe) - 1e-9)
    covered: set[int] = set()
    picked: list[str] = []
    remaining = dict(sets)
    while len(covered) < need:
        best_key, best_gain = None, 0
        for key in sorted(remaining):
            gain = len(remaining[key] - covered)
            if gain > best_gain:
                best_key, best_gain = key, gain
        if best_key is None:
            raise CoverError(sorted(set(universe) - covered))
        picked.append(best_key)
        covered |= remaining.pop(best_key)
    return picked, covered


def near_optimal_sets(
    dataset: ExecutionDataset, instances: Sequence[int], plans: Sequence[str], epsilon: float
) -> dict[str, frozenset[int]]:
    fastest: dict[int, float] = {}
    for q in instances:
        lats = [estimated_latency(r) for p in plans if (r := dataset.record(q, p)) is not None and not r.censored]
        if not lats:
            raise CoverError([q])
        fastest[q] = min(lats)
    sets: dict[str, set[int]] = {p: set() for p in plans}
    for q in instances:
        for p in plans:
            r = dataset.record(q, p)
            if r is not None and not r.censored and estimated_latency(r) <= (1 + epsilon) * fastest[q]:
                sets[p].add(q)
    return {p: frozenset(s) for p, s in sets.items()}


def compute_plan_cover(
    dataset: ExecutionDataset, instances: Sequence[int], plans: Sequence[str], epsilon: float, delta: float
) -> PlanCover:
    sets = near_optimal_sets(dataset, instances, plans, epsilon)
    picked, covered = greedy_set_cover(sets, list(instances), delta)
    return PlanCover(
        tuple(picked),
        len(covered) / len(instances),
        {p: tuple(sorted(sets[p])) for p in picked},
        epsilon,
        delta,
        len(instances),
    )


# ---------------------------------------------------------------------------
# orchestration


def collect_training_data(
    w: Workload,
    candidates: CandidateSet,
    executor: OptimizerInterface,
    policy: CollectionPolicy,
    provenance: Mapping | None = None,
) -> tuple[ExecutionDataset, PlanCover, CollectStats]:
    """Defaults for everyone, full matrix on the bootstrap prefix, cover plans afterwards."""
    if len(candidates) == 0:
        raise ValueError("no candidate plans")
    plans = candidates.plans()
    instances = list(w.instances)
    n = len(instances)
    defaults = list(candidates.defaults)
    if len(defaults) != n:
        defaults = []
        for q in instances:
            p = executor.plan(q, RowCountMap())
            fp = plan_fingerprint(p, executor.template.tables)
            plans.setdefault(fp, p)
            defaults.append(fp)
    stats = CollectStats()

    # phase 1: default plans, no timeout
    history = History()
    default_records = []
    for i, q in enumerate(instances):
        rec = _run_plan(plans[defaults[i]], q, i, executor, policy, None, stats)
        default_records.append(rec)
    stats.per_phase["defaults"] = stats.executions

    order = tail_order([estimated_latency(r) for r in default_records]) if policy.tail_reorder else list(range(n))
    boot = order[: policy.bootstrap_instances]
    rest = order[policy.bootstrap_instances :]

    # phase 2: every candidate on the bootstrap prefix
    by_instance: dict[int, list[ExecutionRecord]] = {}
    all_fps = list(plans)
    for i in boot:
        by_instance[i] = collect_instance(
            instances[i], i, plans, defaults[i], executor, policy, history, default_records[i], stats
        )
    stats.per_phase["bootstrap"] = stats.executions - stats.per_phase["defaults"]

    partial = _assemble(executor.template, w, plans, defaults, default_records, by_instance, provenance)
    cover = compute_plan_cover(partial, boot, all_fps, policy.plan_cover_epsilon, policy.plan_cover_delta)

    # phase 3: remaining instances against the cover only
    done = stats.executions
    for i in rest:
        subset = {fp: plans[fp] for fp in cover.plans}
        subset[defaults[i]] = plans[defaults[i]]
        by_instance[i] = collect_instance(
            instances[i], i, subset, defaults[i], executor, policy, history, default_records[i], stats
        )
    stats.per_phase["cover"] = stats.executions - done
    return _assemble(executor.template, w, plans, defaults, default_records, by_instance, provenance), cover, stats


def _assemble(template, w, plans, defaults, default_records, by_instance, provenance) -> ExecutionDataset:
    records = []
    for i in range(len(w)):
        records.extend(by_instance.get(i, [default_records[i]]))
    return ExecutionDataset(
        template=template,
        instances=tuple(w.instances),
        plans=dict(sorted(plans.items())),
        default_plans=tuple(defaults),
        records=tuple(records),
        provenance=dict(provenance or {}),
    )
