"""Row Count Evolution: candidate plans from perturbed join cardinalities."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .core import (
    FORMAT_VERSION,
    FormatError,
    PlanTree,
    QueryInstance,
    SubPlanKey,
    Workload,
    check_header,
    join_subplans,
    plan_fingerprint,
    plan_from_json,
    plan_to_json,
)
from .simdb.planner import OptimizerInterface


@dataclass(frozen=True)
class RceParams:
    generations: int = 3
    exponent_base: float = 10.0
    exponent_range: int = 2
    samples_per_generation: int = 20
    perturbations_per_plan: int = 20
    subplan_perturbation_limit: int = 5
    per_instance_plan_limit: int = 1000
    total_plan_limit: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if not self.exponent_base > 1:
            raise ValueError("exponent_base must be > 1")
        for name in (
            "exponent_range",
            "samples_per_generation",
            "perturbations_per_plan",
            "subplan_perturbation_limit",
            "per_instance_plan_limit",
            "total_plan_limit",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_json(cls, d: Mapping) -> RceParams:
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


class RowCountMap(Mapping[SubPlanKey, int]):
    """Join sub-plan -> row count override, with a per-key perturbation counter."""

    __slots__ = ("_counts", "_perturbed")

    def __init__(self, counts: Mapping[SubPlanKey, int] | None = None, perturbed: Mapping[SubPlanKey, int] | None = None):
        counts = dict(counts or {})
        for k, v in counts.items():
            if not k.is_join:
                raise ValueError(f"base-table key {k} cannot be overridden")
            if v < 1:
                raise ValueError(f"row count for {k} must be >= 1")
        self._counts = counts
        self._perturbed = dict(perturbed or {})

    def __getitem__(self, key: SubPlanKey) -> int:
        return self._counts[key]

    def __iter__(self) -> Iterator[SubPlanKey]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def perturbations(self, key: SubPlanKey) -> int:
        return self._perturbed.get(key, 0)

    def __eq__(self, other):
        return isinstance(other, RowCountMap) and self._counts == other._counts and self._perturbed == other._perturbed

    def __hash__(self):
        return hash(frozenset(self._counts.items()))

    def __repr__(self):
        inner = ", ".join(f"{k}: {v}" for k, v in sorted(self._counts.items(), key=lambda kv: kv[0].table_set))
        return f"RowCountMap({{{inner}}})"

    def to_json(self) -> dict:
        return {str(k): [v, self._perturbed.get(k, 0)] for k, v in sorted(self._counts.items(), key=lambda kv: kv[0].table_set)}

    @classmethod
    def from_json(cls, d: Mapping) -> RowCountMap:
        counts, perturbed = {}, {}
        for k, (v, n) in d.items():
            key = SubPlanKey.parse(k)
            counts[key] = int(v)
            perturbed[key] = int(n)
        return cls(counts, perturbed)


def perturbation_factors(w: float, base: float, m: int) -> list[float]:
    """The 2m+1 exponentially spaced multipliers for an estimated count ``w``."""
    if w <= 0:
        w = 1.0
    e_l = -min(math.log(w, base), m)
    return [base ** (e_l + j) for j in range(2 * m + 1)]


def perturbed_count(w: float, f: float) -> int:
    c = w * f
    if f != 1.0:
        # absorb the rounding of b**e and of the product so 40 * 10**-1 cannot floor to 3
        r = round(c)
        if abs(c - r) <= 4 * math.ulp(max(abs(c), 1.0)):
            c = r
    return max(1, math.floor(c))


def perturbation_candidates(w: float, base: float, m: int) -> list[int]:
    w_eff = w if w > 0 else 1.0
    return sorted({perturbed_count(w_eff, f) for f in perturbation_factors(w, base, m)})


def sample_perturbations(plan: PlanTree, r: RowCountMap, params: RceParams, rng: np.random.Generator) -> RowCountMap:
    """Perturb every join sub-plan of ``plan`` that is still under its perturbation limit."""
    counts = dict(r._counts)
    perturbed = dict(r._perturbed)
    for key, w in join_subplans(plan):
        n = perturbed.get(key, 0)
        if n >= params.subplan_perturbation_limit:
            continue
        w = w if w > 0 else 1.0
        factors = perturbation_factors(w, params.exponent_base, params.exponent_range)
        f = factors[int(rng.integers(0, len(factors)))]
        counts[key] = perturbed_count(w, f)
        perturbed[key] = n + 1
    return RowCountMap(counts, perturbed)


@dataclass(frozen=True)
class Candidate:
    plan: PlanTree
    row_counts: RowCountMap
    fingerprint: str
    generation: int
    parent: str | None = None
    origin: int = 0  # workload index of the instance whose evolution produced it


@dataclass
class CandidateSet:
    """Deduplicated candidate plans, indexed by fingerprint.

    ``defaults`` holds each workload instance's default-plan fingerprint
    when the set was built for a workload.
    """

    entries: dict[str, Candidate] = field(default_factory=dict)
    defaults: list[str] = field(default_factory=list)
    template_id: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, fp: str) -> bool:
        return fp in self.entries

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.entries.values())

    @property
    def generations(self) -> list[list[Candidate]]:
        top = max((c.generation for c in self.entries.values()), default=-1)
        out: list[list[Candidate]] = [[] for _ in range(top + 1)]
        for c in self.entries.values():
            out[c.generation].append(c)
        return out

    def fingerprints(self) -> list[str]:
        return list(self.entries)

    def plans(self) -> dict[str, PlanTree]:
        return {fp: c.plan for fp, c in self.entries.items()}

    def add(self, cand: Candidate) -> bool:
        if cand.fingerprint in self.entries:
            return False
        self.entries[cand.fingerprint] = cand
        return True

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, params: RceParams | None = None, provenance: dict | None = None) -> None:
        header = {
            "format_version": FORMAT_VERSION,
            "kind": "candidate_set",
            "template_id": self.template_id,
            "params": params.to_json() if params else None,
            "defaults": self.defaults,
            "provenance": provenance or {},
        }
        lines = [json.dumps(header, separators=(",", ":"))]
        for c in self.entries.values():
            lines.append(
                json.dumps(
                    {
                        "fingerprint": c.fingerprint,
                        "generation": c.generation,
                        "parent": c.parent,
                        "origin": c.origin,
                        "row_counts": c.row_counts.to_json(),
                        "plan": plan_to_json(c.plan),
                    },
                    separators=(",", ":"),
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> CandidateSet:
        with open(path) as fh:
            raw = fh.readlines()
        if not raw:
            raise FormatError("empty file", 1)
        try:
            header = json.loads(raw[0])
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed JSON ({exc.msg})", 1) from None
        check_header(header, "candidate_set")
        out = cls(defaults=list(header.get("defaults", [])), template_id=header.get("template_id", ""))
        for lineno, line in enumerate(raw[1:], start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                plan = plan_from_json(d["plan"])
                cand = Candidate(plan, RowCountMap.from_json(d["row_counts"]), d["fingerprint"], int(d["generation"]), d["parent"], int(d["origin"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad candidate: {exc}", lineno) from None
            if plan_fingerprint(plan) != cand.fingerprint:
                raise FormatError("fingerprint does not match plan", lineno)
            out.add(cand)
        return out


def row_count_evolution(
    instance: QueryInstance,
    optimizer: OptimizerInterface,
    params: RceParams,
    rng: np.random.Generator,
    origin: int = 0,
) -> CandidateSet:
    """Evolve candidate plans for one instance; generation 0 is the default plan."""
    tables = optimizer.template.tables
    base = optimizer.plan(instance, RowCountMap())
    base_fp = plan_fingerprint(base, tables)
    out = CandidateSet(template_id=optimizer.template.template_id)
    out.add(Candidate(base, RowCountMap(), base_fp, 0, None, origin))
    prev = [out.entries[base_fp]]
    for g in range(1, params.generations + 1):
        if not prev or len(out) >= params.per_instance_plan_limit:
            break
        if len(prev) <= params.samples_per_generation:
            parents = prev
        else:
            idx = rng.choice(len(prev), size=params.samples_per_generation, replace=False)
            parents = [prev[int(i)] for i in idx]
        current: list[Candidate] = []
        for parent in parents:
            for _ in range(params.perturbations_per_plan):
                r2 = sample_perturbations(parent.plan, parent.row_counts, params, rng)
                child = optimizer.plan(instance, r2)
                fp = plan_fingerprint(child, tables)
                if fp in out:
                    continue
                cand = Candidate(child, r2, fp, g, parent.fingerprint, origin)
                out.add(cand)
                current.append(cand)
                if len(out) >= params.per_instance_plan_limit:
                    return out
        prev = current
    return out


def instance_rng(params: RceParams, index: int) -> np.random.Generator:
    return np.random.default_rng([params.seed, index])


def workload_candidate_generation(w: Workload, optimizer: OptimizerInterface, params: RceParams, jobs: int = 1) -> CandidateSet:
    """Union of per-instance evolutions with global deduplication.

    After ``total_plan_limit`` is reached the remaining instances contribute
    only their default plans. Per-instance randomness is derived from
    ``(params.seed, index)`` so results do not depend on ``jobs``.
    """
    if len(w) == 0:
        raise ValueError("empty workload")
    out = CandidateSet(template_id=w.template_id)
    instances = list(w.instances)

    def evolve(i: int) -> CandidateSet:
        return row_count_evolution(instances[i], optimizer, params, instance_rng(params, i), origin=i)

    step = max(jobs, 1)
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for start in range(0, len(instances), step):
            if len(out) >= params.total_plan_limit:
                break
            chunk = range(start, min(start + step, len(instances)))
            results = list(pool.map(evolve, chunk)) if pool else [evolve(j) for j in chunk]
            for cs in results:
                if len(out) >= params.total_plan_limit:
                    break
                for cand in cs:
                    out.add(cand)
                out.defaults.append(next(c.fingerprint for c in cs if c.generation == 0))
    finally:
        if pool:
            pool.shutdown()
    for j in range(len(out.defaults), len(instances)):
        plan = optimizer.plan(instances[j], RowCountMap())
        fp = plan_fingerprint(plan, optimizer.template.tables)
        out.add(Candidate(plan, RowCountMap(), fp, 0, None, j))
        out.defaults.append(fp)
    return out
