"""Domain vocabulary: templates, instances, plans, execution records and datasets.

Everything here is immutable after construction. Datasets persist as
line-delimited JSON (see ``docs/formats.md``).
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

SCAN_OPS = ("SeqScan", "IndexScan")
JOIN_OPS = ("HashJoin", "NestedLoop", "MergeJoin")
PARAM_TYPES = ("int", "float", "string", "date")

DATE_EPOCH = _dt.date(1970, 1, 1)


class StructureError(ValueError):
    """A plan or template violates its structural invariants."""


class FormatError(ValueError):
    """A persisted file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ---------------------------------------------------------------------------
# templates and instances


@dataclass(frozen=True)
class Predicate:
    table: str
    column: str
    op: str  # "=" or "<="
    slot: int


@dataclass(frozen=True)
class ParamSpec:
    type: str
    table: str
    column: str


@dataclass(frozen=True)
class JoinEdge:
    left: str
    right: str
    label: str  # join column name shared by both tables

    @property
    def tables(self) -> frozenset[str]:
        return frozenset((self.left, self.right))


@dataclass(frozen=True)
class QueryTemplate:
    template_id: str
    tables: tuple[str, ...]
    join_graph: tuple[JoinEdge, ...]
    predicates: tuple[Predicate, ...]
    param_specs: tuple[ParamSpec, ...]

    def __post_init__(self):
        if len(self.param_specs) < 1:
            raise StructureError("a template needs at least one parameter")
        if len(set(self.tables)) != len(self.tables):
            raise StructureError("duplicate table in template")
        slots = sorted(p.slot for p in self.predicates)
        if slots != list(range(len(self.param_specs))):
            raise StructureError(f"parameter slots {slots} do not cover 0..{len(self.param_specs) - 1} exactly once")
        for spec in self.param_specs:
            if spec.type not in PARAM_TYPES:
                raise StructureError(f"unknown parameter type {spec.type!r}")
        known = set(self.tables)
        for e in self.join_graph:
            if e.left not in known or e.right not in known or e.left == e.right:
                raise StructureError(f"bad join edge {e}")
        if not self.is_connected(frozenset(self.tables)):
            raise StructureError("join graph is not connected")

    @property
    def m(self) -> int:
        return len(self.param_specs)

    def neighbors(self, table: str) -> list[tuple[str, JoinEdge]]:
        out = []
        for e in self.join_graph:
            if e.left == table:
                out.append((e.right, e))
            elif e.right == table:
                out.append((e.left, e))
        return out

    def edges_within(self, tables: frozenset[str]) -> list[JoinEdge]:
        return [e for e in self.join_graph if e.left in tables and e.right in tables]

    def edges_between(self, a: frozenset[str], b: frozenset[str]) -> list[JoinEdge]:
        return [e for e in self.join_graph if (e.left in a and e.right in b) or (e.left in b and e.right in a)]

    def is_connected(self, tables: frozenset[str]) -> bool:
        if not tables:
            return False
        start = min(tables)
        seen = {start}
        stack = [start]
        while stack:
            t = stack.pop()
            for n, _ in self.neighbors(t):
                if n in tables and n not in seen:
                    seen.add(n)
                    stack.append(n)
        return seen == set(tables)

    def predicates_on(self, table: str) -> list[Predicate]:
        return [p for p in self.predicates if p.table == table]

    def to_json(self) -> dict:
        return {
            "template_id": self.template_id,
            "tables": list(self.tables),
            "join_graph": [[e.left, e.right, e.label] for e in self.join_graph],
            "predicates": [[p.table, p.column, p.op, p.slot] for p in self.predicates],
            "param_specs": [{"type": s.type, "table": s.table, "column": s.column} for s in self.param_specs],
        }

    @classmethod
    def from_json(cls, d: dict) -> QueryTemplate:
        return cls(
            template_id=d["template_id"],
            tables=tuple(d["tables"]),
            join_graph=tuple(JoinEdge(*e) for e in d["join_graph"]),
            predicates=tuple(Predicate(t, c, op, int(s)) for t, c, op, s in d["predicates"]),
            param_specs=tuple(ParamSpec(**s) for s in d["param_specs"]),
        )


def _check_binding(spec: ParamSpec, value: Any) -> None:
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "string": lambda v: isinstance(v, str),
        "date": lambda v: isinstance(v, _dt.date),
    }[spec.type]
    if not ok(value):
        raise StructureError(f"binding {value!r} does not match parameter type {spec.type}")


def encode_binding(value: Any) -> Any:
    if isinstance(value, _dt.date):
        return value.isoformat()
    return value


def decode_binding(spec: ParamSpec, raw: Any) -> Any:
    if spec.type == "date":
        return _dt.date.fromisoformat(raw)
    if spec.type == "float":
        return float(raw)
    return raw


@dataclass(frozen=True)
class QueryInstance:
    template_id: str
    bindings: tuple

    def check(self, template: QueryTemplate) -> None:
        if self.template_id != template.template_id:
            raise StructureError(f"instance of {self.template_id!r} used with template {template.template_id!r}")
        if len(self.bindings) != template.m:
            raise StructureError(f"expected {template.m} bindings, got {len(self.bindings)}")
        for spec, v in zip(template.param_specs, self.bindings):
            _check_binding(spec, v)

    @property
    def key(self) -> str:
        """Stable textual identity, used to derive per-instance seeds."""
        return json.dumps([self.template_id, [encode_binding(b) for b in self.bindings]])


@dataclass(frozen=True)
class Workload:
    template_id: str
    instances: tuple[QueryInstance, ...]

    def __post_init__(self):
        for q in self.instances:
            if q.template_id != self.template_id:
                raise StructureError("workload mixes templates")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[QueryInstance]:
        return iter(self.instances)

    def subset(self, indices: Sequence[int]) -> Workload:
        return Workload(self.template_id, tuple(self.instances[i] for i in indices))


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if n == 0:
        raise ValueError("cannot split an empty workload")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * train_fraction + 0.5))
    if n_train == n or n_train == 0:
        log.warning("degenerate split of %d instances at fraction %.2f", n, train_fraction)
    train = sorted(int(i) for i in perm[:n_train])
    test = sorted(int(i) for i in perm[n_train:])
    return train, test


def split_workload(w: Workload, train_fraction: float, seed: int) -> tuple[Workload, Workload]:
    train, test = split_indices(len(w), train_fraction, seed)
    return w.subset(train), w.subset(test)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class SubPlanKey:
    table_set: tuple[str, ...]

    def __post_init__(self):
        if not self.table_set:
            raise StructureError("empty sub-plan")
        object.__setattr__(self, "table_set", tuple(sorted(set(self.table_set))))

    @classmethod
    def of(cls, tables: Iterable[str]) -> SubPlanKey:
        return cls(tuple(tables))

    @property
    def is_join(self) -> bool:
        return len(self.table_set) >= 2

    def __str__(self) -> str:
        return "+".join(self.table_set)

    @classmethod
    def parse(cls, s: str) -> SubPlanKey:
        return cls(tuple(s.split("+")))


@dataclass(frozen=True)
class Scan:
    table: str
    op: str
    estimated_cardinality: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.op not in SCAN_OPS:
            raise StructureError(f"unknown scan operator {self.op!r}")

    @property
    def tables(self) -> frozenset[str]:
        return frozenset((self.table,))


@dataclass(frozen=True)
class Join:
    op: str
    left: "PlanTree"
    right: "PlanTree"
    estimated_cardinality: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.op not in JOIN_OPS:
            raise StructureError(f"unknown join operator {self.op!r}")
        if self.left.tables & self.right.tables:
            overlap = sorted(self.left.tables & self.right.tables)
            raise StructureError(f"table(s) {overlap} appear more than once")
        object.__setattr__(self, "_tables", self.left.tables | self.right.tables)

    @property
    def tables(self) -> frozenset[str]:
        return self._tables  # type: ignore[attr-defined]


PlanTree = Scan | Join


def iter_nodes(plan: PlanTree) -> Iterator[PlanTree]:
    """Pre-order traversal."""
    yield plan
    if isinstance(plan, Join):
        yield from iter_nodes(plan.left)
        yield from iter_nodes(plan.right)


def join_subplans(plan: PlanTree) -> list[tuple[SubPlanKey, float]]:
    """(key, estimated cardinality) for every internal node, pre-order."""
    return [(SubPlanKey.of(n.tables), n.estimated_cardinality) for n in iter_nodes(plan) if isinstance(n, Join)]


def canonical_plan(plan: PlanTree) -> str:
    parts = []
    for node in iter_nodes(plan):
        if isinstance(node, Scan):
            parts.append(f"{node.op}({node.table})")
        else:
            left = ",".join(sorted(node.left.tables))
            right = ",".join(sorted(node.right.tables))
            parts.append(f"{node.op}[{left}|{right}]")
    return ";".join(parts)


def validate_plan(plan: PlanTree, tables: Iterable[str]) -> None:
    leaves = [n.table for n in iter_nodes(plan) if isinstance(n, Scan)]
    if len(leaves) != len(set(leaves)):
        raise StructureError("duplicate leaf")
    if set(leaves) != set(tables):
        missing = sorted(set(tables) - set(leaves))
        extra = sorted(set(leaves) - set(tables))
        raise StructureError(f"leaf mismatch: missing {missing}, unexpected {extra}")


def plan_fingerprint(plan: PlanTree, tables: Iterable[str] | None = None) -> str:
    """16-hex-digit digest of plan structure; cardinality annotations are ignored."""
    if tables is not None:
        validate_plan(plan, tables)
    return hashlib.sha256(canonical_plan(plan).encode()).hexdigest()[:16]


def plan_to_json(plan: PlanTree) -> dict:
    if isinstance(plan, Scan):
        return {"scan": plan.op, "table": plan.table, "rows": plan.estimated_cardinality}
    return {
        "join": plan.op,
        "rows": plan.estimated_cardinality,
        "left": plan_to_json(plan.left),
        "right": plan_to_json(plan.right),
    }


def plan_from_json(d: dict) -> PlanTree:
    if "scan" in d:
        return Scan(d["table"], d["scan"], float(d["rows"]))
    return Join(d["join"], plan_from_json(d["left"]), plan_from_json(d["right"]), float(d["rows"]))


def plan_repr(plan: PlanTree) -> str:
    """Compact human-readable form, e.g. ``HashJoin(SeqScan(a), IndexScan(b))``."""
    if isinstance(plan, Scan):
        return f"{plan.op}({plan.table})"
    return f"{plan.op}({plan_repr(plan.left)}, {plan_repr(plan.right)})"


# ---------------------------------------------------------------------------
# execution data


@dataclass(frozen=True)
class ExecutionRecord:
    instance: int
    plan: str
    latencies_ms: tuple[float, ...]
    censored: bool = False
    timeout_ms: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "latencies_ms", tuple(float(x) for x in self.latencies_ms))
        if any(not x > 0 for x in self.latencies_ms):
            raise ValueError("latencies must be positive")
        if self.censored:
            if self.timeout_ms is None:
                raise ValueError("censored record without timeout")
            if self.latencies_ms and min(self.latencies_ms) < self.timeout_ms:
                raise ValueError("censored record has a latency below its timeout")

    def to_json(self) -> dict:
        return {
            "instance": self.instance,
            "plan": self.plan,
            "latencies_ms": list(self.latencies_ms),
            "censored": self.censored,
            "timeout_ms": self.timeout_ms,
        }

    @classmethod
    def from_json(cls, d: dict) -> ExecutionRecord:
        return cls(
            instance=int(d["instance"]),
            plan=str(d["plan"]),
            latencies_ms=tuple(d["latencies_ms"]),
            censored=bool(d["censored"]),
            timeout_ms=None if d["timeout_ms"] is None else float(d["timeout_ms"]),
        )


def estimated_latency(record: ExecutionRecord) -> float:
    """Minimum over repeats; a censored record reports its timeout (a lower bound)."""
    if not record.latencies_ms:
        raise ValueError("record has no latencies")
    if record.censored:
        return float(record.timeout_ms)
    return min(record.latencies_ms)


@dataclass(frozen=True)
class ExecutionDataset:
    template: QueryTemplate
    instances: tuple[QueryInstance, ...]
    plans: dict[str, PlanTree]
    default_plans: tuple[str, ...]
    records: tuple[ExecutionRecord, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.default_plans) != len(self.instances):
            raise ValueError("one default plan per instance required")
        for fp in self.default_plans:
            if fp not in self.plans:
                raise ValueError(f"default plan {fp} missing from plan table")
        seen_default = set()
        for r in self.records:
            if r.plan not in self.plans:
                raise ValueError(f"record references unknown plan {r.plan}")
            if not 0 <= r.instance < len(self.instances):
                raise ValueError(f"record references unknown instance {r.instance}")
            if r.plan == self.default_plans[r.instance]:
                seen_default.add(r.instance)
        missing = set(range(len(self.instances))) - seen_default
        if missing:
            raise ValueError(f"instances without a default-plan record: {sorted(missing)[:10]}")
        object.__setattr__(self, "_index", self._build_index())

    def _build_index(self) -> dict[tuple[int, str], ExecutionRecord]:
        index: dict[tuple[int, str], ExecutionRecord] = {}
        for r in self.records:
            index[(r.instance, r.plan)] = r
        return index

    def record(self, instance: int, plan: str) -> ExecutionRecord | None:
        return self._index.get((instance, plan))  # type: ignore[attr-defined]

    def latency(self, instance: int, plan: str) -> float:
        r = self.record(instance, plan)
        if r is None:
            raise KeyError(f"no record for instance {instance}, plan {plan}")
        return estimated_latency(r)

    def default_latency(self, instance: int) -> float:
        return self.latency(instance, self.default_plans[instance])

    def plans_for(self, instance: int) -> list[str]:
        return [r.plan for r in self.records if r.instance == instance]

    def latency_matrix(self, plans: Sequence[str], instances: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """(latencies, censored) arrays of shape (len(instances), len(plans)); missing -> nan."""
        lat = np.full((len(instances), len(plans)), np.nan)
        cens = np.zeros((len(instances), len(plans)), dtype=bool)
        for i, q in enumerate(instances):
            for j, p in enumerate(plans):
                r = self.record(q, p)
                if r is not None:
                    lat[i, j] = estimated_latency(r)
                    cens[i, j] = r.censored
        return lat, cens

    @property
    def workload(self) -> Workload:
        return Workload(self.template.template_id, self.instances)

    def structurally_equal(self, other: ExecutionDataset) -> bool:
        return (
            self.template == other.template
            and self.instances == other.instances
            and set(self.plans) == set(other.plans)
            and all(self.plans[k] == other.plans[k] for k in self.plans)
            and self.default_plans == other.default_plans
            and self.records == other.records
            and self.provenance == other.provenance
        )


# ---------------------------------------------------------------------------
# persistence


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def workload_header(template: QueryTemplate, kind: str) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": kind, "template": template.to_json()}


def instance_to_json(q: QueryInstance) -> list:
    return [encode_binding(b) for b in q.bindings]


def instance_from_json(template: QueryTemplate, raw: list) -> QueryInstance:
    if len(raw) != template.m:
        raise StructureError(f"expected {template.m} bindings, got {len(raw)}")
    q = QueryInstance(template.template_id, tuple(decode_binding(s, v) for s, v in zip(template.param_specs, raw)))
    q.check(template)
    return q


def dataset_to_lines(ds: ExecutionDataset) -> list[str]:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "execution_dataset",
        "template": ds.template.to_json(),
        "instances": [instance_to_json(q) for q in ds.instances],
        "plans": {fp: plan_to_json(ds.plans[fp]) for fp in sorted(ds.plans)},
        "default_plans": list(ds.default_plans),
        "provenance": ds.provenance,
    }
    return [_dumps(header)] + [_dumps(r.to_json()) for r in ds.records]


def export_dataset(ds: ExecutionDataset, path: str | Path) -> None:
    Path(path).write_text("\n".join(dataset_to_lines(ds)) + "\n")


def _parse_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise FormatError("expected a JSON object", lineno)
            yield lineno, obj


def check_header(obj: dict, kind: str, lineno: int = 1) -> None:
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})", lineno)
    if obj.get("kind") != kind:
        raise FormatError(f"expected a {kind} file, found {obj.get('kind')!r}", lineno)


def import_dataset(path: str | Path) -> ExecutionDataset:
    lines = _parse_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise FormatError("empty file", 1) from None
    check_header(header, "execution_dataset", lineno)
    try:
        template = QueryTemplate.from_json(header["template"])
        instances = tuple(instance_from_json(template, raw) for raw in header["instances"])
        plans = {fp: plan_from_json(p) for fp, p in header["plans"].items()}
        defaults = tuple(header["default_plans"])
        provenance = header.get("provenance", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad header: {exc}", lineno) from None
    for fp, plan in plans.items():
        if plan_fingerprint(plan, template.tables) != fp:
            raise FormatError(f"plan table entry {fp} does not match its structure", lineno)
    records = []
    for lineno, obj in lines:
        try:
            rec = ExecutionRecord.from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad record: {exc}", lineno) from None
        if rec.plan not in plans:
            raise FormatError(f"record references unknown plan {rec.plan}", lineno)
        if not 0 <= rec.instance < len(instances):
            raise FormatError(f"record references unknown instance {rec.instance}", lineno)
        records.append(rec)
    try:
        return ExecutionDataset(template, instances, plans, defaults, tuple(records), provenance)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_workload(w: Workload, template: QueryTemplate, path: str | Path, provenance: dict | None = None) -> None:
    header = workload_header(template, "workload")
    if provenance:
        header["provenance"] = provenance
    lines = [_dumps(header)]
    lines += [_dumps({"bindings": instance_to_json(q)}) for q in w.instances]
    Path(path).write_text("\n".join(lines) + "\n")


def load_workload(path: str | Path) -> tuple[QueryTemplate, Workload]:
    lines = _parse_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise FormatError("empty file", 1) from None
    check_header(header, "workload", lineno)
    template = QueryTemplate.from_json(header["template"])
    instances = []
    for lineno, obj in lines:
        try:
            instances.append(instance_from_json(template, obj["bindings"]))
        except (KeyError, StructureError, ValueError, TypeError) as exc:
            raise FormatError(f"bad instance: {exc}", lineno) from None
    return template, Workload(template.template_id, tuple(instances))


def config_digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
