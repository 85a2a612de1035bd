"""Cost-based planner and latency simulator over a synthetic schema."""

from __future__ import annotations

import abc
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from ..core import (
    JOIN_OPS,
    SCAN_OPS,
    ExecutionRecord,
    Join,
    PlanTree,
    QueryInstance,
    QueryTemplate,
    Scan,
    StructureError,
    SubPlanKey,
    iter_nodes,
    plan_fingerprint,
)
from .schema import CardinalityOracle, Schema

OPERATORS = SCAN_OPS + JOIN_OPS


@dataclass(frozen=True)
class CostModel:
    """Per-operator cost coefficients (milliseconds per unit of work).

    ``distortion`` multiplies each operator's cost when *executing* a plan;
    the planner never sees it.
    """

    seq_row: float = 2e-4
    tuple_out: float = 1e-4
    index_probe: float = 0.02
    index_row: float = 1e-3
    hash_build: float = 4e-4
    hash_probe: float = 2e-4
    nl_pair: float = 1e-5
    sort_row: float = 1e-4
    merge_row: float = 1e-4
    distortion: dict = field(default_factory=lambda: {op: 1.0 for op in OPERATORS})

    def __post_init__(self):
        for name, v in asdict(self).items():
            if name != "distortion" and not v > 0:
                raise ValueError(f"cost coefficient {name} must be positive")
        full = {op: 1.0 for op in OPERATORS}
        full.update(self.distortion)
        if any(not v > 0 for v in full.values()):
            raise ValueError("distortion factors must be positive")
        object.__setattr__(self, "distortion", full)

    @classmethod
    def with_random_distortion(cls, seed: int, spread: float = 2.0, **kw) -> CostModel:
        rng = np.random.default_rng(seed)
        factors = np.exp(rng.uniform(-math.log(spread), math.log(spread), len(OPERATORS)))
        return cls(distortion={op: float(f) for op, f in zip(OPERATORS, factors)}, **kw)

    def scan_cost(self, op: str, base_rows: float, out: float) -> float:
        if op == "SeqScan":
            return self.seq_row * base_rows + self.tuple_out * out
        return self.index_probe * math.log2(base_rows + 1.0) + self.index_row * out

    def join_cost(self, op: str, left: float, right: float, out: float) -> float:
        if op == "HashJoin":
            c = self.hash_build * right + self.hash_probe * left
        elif op == "NestedLoop":
            c = self.nl_pair * left * right
        else:
            c = self.sort_row * (left * math.log2(left + 1.0) + right * math.log2(right + 1.0))
            c += self.merge_row * (left + right)
        return c + self.tuple_out * out

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> CostModel:
        return cls(**d)


class OptimizerInterface(abc.ABC):
    """The seam between the pipeline and a database.

    ``plan(q, {})`` is the database's default plan. A live-DBMS adapter would
    implement ``plan`` with row-count hints and ``execute`` by forcing the
    plan through join-order / operator hints.
    """

    template: QueryTemplate

    @abc.abstractmethod
    def plan(self, instance: QueryInstance, overrides: Mapping[SubPlanKey, float] | None = None) -> PlanTree: ...

    @abc.abstractmethod
    def execute(
        self,
        plan: PlanTree,
        instance: QueryInstance,
        timeout_ms: float | None = None,
        repeats: int = 3,
        seed: int = 0,
        index: int = 0,
        repeat_offset: int = 0,
    ) -> ExecutionRecord: ...


class _PlanSpace:
    """Connected sub-sets of a template and their binary splits."""

    def __init__(self, template: QueryTemplate):
        tables = list(template.tables)
        n = len(tables)
        subsets = []
        for mask in range(1, 1 << n):
            s = frozenset(tables[i] for i in range(n) if mask >> i & 1)
            if template.is_connected(s):
                subsets.append(s)
        subsets.sort(key=lambda s: (len(s), sorted(s)))
        connected = set(subsets)
        self.subsets = subsets
        self.splits: dict[frozenset[str], list[tuple[frozenset[str], frozenset[str]]]] = {}
        for s in subsets:
            if len(s) < 2:
                continue
            members = sorted(s)
            pairs = []
            for mask in range(1, (1 << len(members)) - 1):
                left = frozenset(members[i] for i in range(len(members)) if mask >> i & 1)
                right = s - left
                if left in connected and right in connected and template.edges_between(left, right):
                    pairs.append((left, right))
            self.splits[s] = pairs


def _scan_options(schema: Schema, template: QueryTemplate, table: str) -> tuple[str, ...]:
    indexed = any((table, p.column) in schema.indexes for p in template.predicates_on(table))
    return SCAN_OPS if indexed else ("SeqScan",)


def _instance_hash(instance: QueryInstance) -> int:
    return int.from_bytes(hashlib.sha256(instance.key.encode()).digest()[:8], "little")


class SimulatedOptimizer(OptimizerInterface):
    """Deterministic optimizer + executor for one template over a synthetic schema."""

    def __init__(
        self,
        schema: Schema,
        template: QueryTemplate,
        cost_model: CostModel | None = None,
        noise_level: float = 0.02,
    ):
        if not 0 <= noise_level < 1:
            raise ValueError("noise_level must lie in [0, 1)")
        schema.check_template(template)
        self.schema = schema
        self.template = template
        self.cost_model = cost_model or CostModel()
        self.noise_level = noise_level
        self.estimator = CardinalityOracle(schema, template, CardinalityOracle.ESTIMATED)
        self.truth = CardinalityOracle(schema, template, CardinalityOracle.TRUE)
        self.space = _PlanSpace(template)
        self.scans = {t: _scan_options(schema, template, t) for t in template.tables}
        self.base_rows = {t: float(schema.tables[t].row_count) for t in template.tables}
        self._plan_cache: dict = {}
        self._latency_cache: dict = {}
        self.plan_calls = 0

    # -- planning ------------------------------------------------------------

    def _cards(self, instance, overrides, exact: bool) -> dict[frozenset[str], float]:
        oracle = self.truth if exact else self.estimator
        return {s: oracle(instance, SubPlanKey.of(s), overrides) for s in self.space.subsets}

    def _dp(self, cards: Mapping[frozenset[str], float]) -> PlanTree:
        cm = self.cost_model
        best: dict[frozenset[str], tuple[float, PlanTree]] = {}

        def offer(key, cost, build):
            cur = best.get(key)
            if cur is None or cost < cur[0] * (1 - 1e-12):
                best[key] = (cost, build())
            elif cost <= cur[0] * (1 + 1e-12):
                cand = build()
                if plan_fingerprint(cand) < plan_fingerprint(cur[1]):
                    best[key] = (cost, cand)

        for s in self.space.subsets:
            if len(s) == 1:
                (t,) = s
                for op in self.scans[t]:
                    offer(s, cm.scan_cost(op, self.base_rows[t], cards[s]), lambda op=op, t=t: Scan(t, op, cards[s]))
                continue
            out = cards[s]
            for left, right in self.space.splits[s]:
                lc, lp = best[left]
                rc, rp = best[right]
                for op in JOIN_OPS:
                    cost = lc + rc + cm.join_cost(op, cards[left], cards[right], out)
                    offer(s, cost, lambda op=op, lp=lp, rp=rp: Join(op, lp, rp, out))
        return best[frozenset(self.template.tables)][1]

    def plan(self, instance: QueryInstance, overrides: Mapping[SubPlanKey, float] | None = None) -> PlanTree:
        """Cheapest plan under estimated cardinalities with join row-count overrides applied."""
        instance.check(self.template)
        tables = set(self.template.tables)
        relevant = []
        for k, v in (overrides or {}).items():
            if not set(k.table_set) <= tables:
                raise StructureError(f"override for unknown sub-plan {k}")
            if k.is_join:
                relevant.append((k.table_set, float(v)))
        key = (instance, tuple(sorted(relevant)))
        self.plan_calls += 1
        hit = self._plan_cache.get(key)
        if hit is None:
            hit = self._dp(self._cards(instance, overrides, exact=False))
            self._plan_cache[key] = hit
        return hit

    def exact_plan(self, instance: QueryInstance) -> PlanTree:
        """The plan chosen when every sub-plan cardinality is the true one."""
        key = (instance, "exact")
        if key not in self._plan_cache:
            self._plan_cache[key] = self._dp(self._cards(instance, None, exact=True))
        return self._plan_cache[key]

    def true_cardinalities(self, instance: QueryInstance) -> dict[SubPlanKey, float]:
        return {SubPlanKey.of(s): self.truth(instance, SubPlanKey.of(s)) for s in self.space.subsets}

    def _tree_cost(self, plan: PlanTree, cards: Mapping[frozenset[str], float], distort: bool) -> float:
        cm = self.cost_model
        total = 0.0
        for node in iter_nodes(plan):
            if isinstance(node, Scan):
                c = cm.scan_cost(node.op, self.base_rows[node.table], cards[node.tables])
            else:
                c = cm.join_cost(node.op, cards[node.left.tables], cards[node.right.tables], cards[node.tables])
            total += c * (cm.distortion[node.op] if distort else 1.0)
        return total

    def estimated_cost(self, plan: PlanTree, instance: QueryInstance, overrides=None) -> float:
        return self._tree_cost(plan, self._cards(instance, overrides, exact=False), distort=False)

    def true_latency(self, plan: PlanTree, instance: QueryInstance) -> float:
        """Noiseless latency in ms: true-cardinality work with hidden distortion."""
        key = (instance, plan_fingerprint(plan))
        if key not in self._latency_cache:
            self._latency_cache[key] = self._tree_cost(plan, self._cards(instance, None, exact=True), distort=True)
        return self._latency_cache[key]

    # -- execution -----------------------------------------------------------

    def execute(
        self,
        plan: PlanTree,
        instance: QueryInstance,
        timeout_ms: float | None = None,
        repeats: int = 3,
        seed: int = 0,
        index: int = 0,
        repeat_offset: int = 0,
    ) -> ExecutionRecord:
        """Run ``plan`` ``repeats`` times.

        Stops at the first repeat that exceeds the timeout. The record is
        censored only if no timed repeat completed.
        """
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        if timeout_ms is not None and not timeout_ms > 0:
            raise ValueError("timeout must be positive")
        fp = plan_fingerprint(plan, self.template.tables)
        base = self.true_latency(plan, instance)
        inst_h = _instance_hash(instance)
        fp_int = int(fp, 16)
        latencies = []
        for r in range(repeat_offset, repeat_offset + repeats):
            rng = np.random.default_rng([seed & 0xFFFFFFFF, inst_h & 0xFFFFFFFF, inst_h >> 32, fp_int & 0xFFFFFFFF, fp_int >> 32, r])
            lat = base * (1.0 + rng.uniform(-self.noise_level, self.noise_level)) if self.noise_level else base
            if timeout_ms is not None and lat > timeout_ms:
                if not latencies:
                    return ExecutionRecord(index, fp, (timeout_ms,), censored=True, timeout_ms=timeout_ms)
                break
            latencies.append(lat)
        return ExecutionRecord(index, fp, tuple(latencies), censored=False, timeout_ms=timeout_ms)


def enumerate_plans(schema: Schema, template: QueryTemplate) -> Iterator[PlanTree]:
    """Every plan in the planner's search space (exponential; for small templates)."""
    space = _PlanSpace(template)
    scans = {t: _scan_options(schema, template, t) for t in template.tables}
    memo: dict[frozenset[str], list[PlanTree]] = {}

    def plans_for(s: frozenset[str]) -> list[PlanTree]:
        if s in memo:
            return memo[s]
        if len(s) == 1:
            (t,) = s
            out = [Scan(t, op) for op in scans[t]]
        else:
            out = [Join(op, lp, rp) for left, right in space.splits[s] for lp in plans_for(left) for rp in plans_for(right) for op in JOIN_OPS]
        memo[s] = out
        return out

    yield from plans_for(frozenset(template.tables))
