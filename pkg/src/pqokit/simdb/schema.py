"""Synthetic database: materialized tables, statistics and cardinality oracles.

Tables hold small integer-coded columns. The join graph is a tree, which lets
exact join sizes be counted by message passing instead of materializing joins.
The estimator mimics a textbook cost-based optimizer: exact single-column
statistics, attribute independence across predicates and joins, and join
selectivity ``1 / max(ndistinct)``.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..core import (
    FORMAT_VERSION,
    FormatError,
    JoinEdge,
    ParamSpec,
    Predicate,
    QueryInstance,
    QueryTemplate,
    StructureError,
    SubPlanKey,
    check_header,
)

DATE_BASE = _dt.date(2020, 1, 1)
COLUMN_KINDS = ("int", "float", "string", "date", "key")


@dataclass(eq=False)
class Column:
    name: str
    kind: str
    domain: int
    freqs: np.ndarray  # frequency model over codes 0..domain-1
    values: np.ndarray  # one code per row
    scale: float = 1.0  # float columns: value = code * scale

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise StructureError(f"unknown column kind {self.kind!r}")
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.freqs.shape != (self.domain,):
            raise StructureError(f"column {self.name}: frequency model must have {self.domain} entries")
        if not math.isclose(float(self.freqs.sum()), 1.0, abs_tol=1e-9):
            raise StructureError(f"column {self.name}: frequency model sums to {self.freqs.sum()}")
        if self.values.size and (self.values.min() < 0 or self.values.max() >= self.domain):
            raise StructureError(f"column {self.name}: value outside domain")
        counts = np.bincount(self.values, minlength=self.domain)
        self.stats = counts / max(len(self.values), 1)  # what ANALYZE would see
        self.ndistinct = int((counts > 0).sum())

    @classmethod
    def from_codes(cls, name: str, kind: str, values, domain: int | None = None, scale: float = 1.0) -> Column:
        values = np.asarray(values, dtype=np.int64)
        domain = int(domain if domain is not None else values.max() + 1)
        freqs = np.bincount(values, minlength=domain) / len(values)
        return cls(name, kind, domain, freqs, values, scale)

    def decode(self, code: int) -> Any:
        """Typed binding value for a code."""
        if self.kind in ("int", "key"):
            return int(code)
        if self.kind == "float":
            return float(code * self.scale)
        if self.kind == "string":
            return f"{self.name}_{int(code):04d}"
        return DATE_BASE + _dt.timedelta(days=int(code))

    def encode(self, value: Any) -> float:
        """Code (possibly fractional) for a binding value; nan when the value is foreign."""
        if self.kind in ("int", "key"):
            return float(value)
        if self.kind == "float":
            return float(value) / self.scale
        if self.kind == "string":
            prefix = f"{self.name}_"
            if isinstance(value, str) and value.startswith(prefix) and value[len(prefix):].isdigit():
                return float(int(value[len(prefix):]))
            return math.nan
        if isinstance(value, _dt.date):
            return float((value - DATE_BASE).days)
        raise StructureError(f"cannot encode {value!r} for date column {self.name}")

    def mask(self, op: str, value: Any) -> np.ndarray:
        code = self.encode(value)
        if math.isnan(code):
            return np.zeros(len(self.values), dtype=bool)
        if op == "=":
            return self.values == code
        if op == "<=":
            return self.values <= code
        raise StructureError(f"unsupported operator {op!r}")

    def estimated_selectivity(self, op: str, value: Any) -> float:
        code = self.encode(value)
        if math.isnan(code):
            return 0.0
        if op == "=":
            return float(self.stats[int(code)]) if float(code).is_integer() and 0 <= code < self.domain else 0.0
        if op == "<=":
            hi = int(math.floor(code))
            return float(self.stats[: max(0, min(hi + 1, self.domain))].sum())
        raise StructureError(f"unsupported operator {op!r}")


@dataclass(eq=False)
class Table:
    name: str
    columns: dict[str, Column]

    def __post_init__(self):
        lengths = {len(c.values) for c in self.columns.values()}
        if len(lengths) != 1:
            raise StructureError(f"table {self.name}: ragged columns")
        self.row_count = lengths.pop()
        if self.row_count < 1:
            raise StructureError(f"table {self.name}: row count must be >= 1")


@dataclass(eq=False)
class Schema:
    tables: dict[str, Table]
    edges: tuple[JoinEdge, ...]
    indexes: frozenset[tuple[str, str]] = frozenset()
    seed: int | None = None
    skew: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for e in self.edges:
            for t in (e.left, e.right):
                if t not in self.tables:
                    raise StructureError(f"edge {e} references unknown table {t}")
                if e.label not in self.tables[t].columns:
                    raise StructureError(f"table {t} lacks join column {e.label}")
        if len(self.edges) != len(self.tables) - 1 or not self._connected():
            raise StructureError("schema join graph must be a spanning tree")
        for t, c in self.indexes:
            if t not in self.tables or c not in self.tables[t].columns:
                raise StructureError(f"index on unknown column {t}.{c}")

    def _connected(self) -> bool:
        names = list(self.tables)
        seen = {names[0]}
        stack = [names[0]]
        while stack:
            t = stack.pop()
            for e in self.edges:
                for a, b in ((e.left, e.right), (e.right, e.left)):
                    if a == t and b not in seen:
                        seen.add(b)
                        stack.append(b)
        return len(seen) == len(names)

    def edge(self, a: str, b: str) -> JoinEdge:
        for e in self.edges:
            if {e.left, e.right} == {a, b}:
                return e
        raise StructureError(f"no join edge between {a} and {b}")

    def join_selectivity(self, e: JoinEdge) -> float:
        """True selectivity of the unfiltered equi-join along ``e``."""
        lc = self.tables[e.left].columns[e.label]
        rc = self.tables[e.right].columns[e.label]
        dom = max(lc.domain, rc.domain)
        a = np.bincount(lc.values, minlength=dom).astype(float)
        b = np.bincount(rc.values, minlength=dom).astype(float)
        return float(a @ b) / (len(lc.values) * len(rc.values))

    def estimated_join_selectivity(self, e: JoinEdge) -> float:
        lc = self.tables[e.left].columns[e.label]
        rc = self.tables[e.right].columns[e.label]
        return 1.0 / max(lc.ndistinct, rc.ndistinct, 1)

    def check_template(self, template: QueryTemplate) -> None:
        for t in template.tables:
            if t not in self.tables:
                raise StructureError(f"unknown table {t}")
        for e in template.join_graph:
            se = self.edge(e.left, e.right)
            if se.label != e.label:
                raise StructureError(f"join column mismatch on {e}")
        if len(template.join_graph) != len(template.tables) - 1:
            raise StructureError("template join graph must be a tree")
        for p in template.predicates:
            if p.column not in self.tables[p.table].columns:
                raise StructureError(f"unknown column {p.table}.{p.column}")

    # -- persistence ---------------------------------------------------------

    def to_lines(self) -> list[str]:
        header = {
            "format_version": FORMAT_VERSION,
            "kind": "schema",
            "seed": self.seed,
            "skew": self.skew,
            "edges": [[e.left, e.right, e.label] for e in self.edges],
            "indexes": sorted([t, c] for t, c in self.indexes),
            "meta": self.meta,
        }
        lines = [json.dumps(header, separators=(",", ":"))]
        for t in self.tables.values():
            cols = [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "domain": c.domain,
                    "scale": c.scale,
                    "freqs": [float(x) for x in c.freqs],
                    "values": c.values.tolist(),
                }
                for c in t.columns.values()
            ]
            lines.append(json.dumps({"table": t.name, "columns": cols}, separators=(",", ":")))
        return lines

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Schema:
        with open(path) as fh:
            raw = [ln for ln in fh]
        if not raw:
            raise FormatError("empty file", 1)
        try:
            header = json.loads(raw[0])
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed JSON ({exc.msg})", 1) from None
        check_header(header, "schema")
        tables = {}
        for lineno, line in enumerate(raw[1:], start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cols = {
                    c["name"]: Column(c["name"], c["kind"], c["domain"], np.array(c["freqs"]), np.array(c["values"]), c["scale"])
                    for c in obj["columns"]
                }
                tables[obj["table"]] = Table(obj["table"], cols)
            except (json.JSONDecodeError, KeyError, TypeError, StructureError) as exc:
                raise FormatError(f"bad table line: {exc}", lineno) from None
        return cls(
            tables,
            tuple(JoinEdge(*e) for e in header["edges"]),
            frozenset((t, c) for t, c in header["indexes"]),
            header.get("seed"),
            header.get("skew"),
            header.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# cardinalities


def _predicate_mask(schema: Schema, template: QueryTemplate, instance: QueryInstance, table: str) -> np.ndarray:
    tab = schema.tables[table]
    mask = np.ones(tab.row_count, dtype=bool)
    for p in template.predicates_on(table):
        mask &= tab.columns[p.column].mask(p.op, instance.bindings[p.slot])
    return mask


def _count_join(schema: Schema, template: QueryTemplate, tables: frozenset[str], masks: Mapping[str, np.ndarray]) -> float:
    """Exact size of the filtered join over a connected subtree, by message passing."""

    def row_weights(node: str, parent: str | None) -> np.ndarray:
        # number of join partners each row of `node` has below it in the subtree
        tab = schema.tables[node]
        weights = masks[node].astype(float)
        for nb, e in template.neighbors(node):
            if nb == parent or nb not in tables:
                continue
            child_col = schema.tables[nb].columns[e.label]
            dom = max(child_col.domain, tab.columns[e.label].domain)
            per_key = np.bincount(child_col.values, weights=row_weights(nb, node), minlength=dom)
            weights = weights * per_key[tab.columns[e.label].values]
        return weights

    return float(row_weights(min(tables), None).sum())


def true_cardinality(schema: Schema, template: QueryTemplate, instance: QueryInstance, sub: SubPlanKey) -> int:
    """Exact row count of the sub-plan over the materialized data."""
    tables = frozenset(sub.table_set)
    unknown = tables - set(template.tables)
    if unknown:
        raise StructureError(f"unknown table(s) {sorted(unknown)}")
    if not template.is_connected(tables):
        raise StructureError(f"sub-plan {sub} is not connected")
    masks = {t: _predicate_mask(schema, template, instance, t) for t in tables}
    return int(round(_count_join(schema, template, tables, masks)))


def estimated_base_cardinality(schema: Schema, template: QueryTemplate, instance: QueryInstance, table: str) -> float:
    tab = schema.tables[table]
    sel = 1.0
    for p in template.predicates_on(table):
        sel *= tab.columns[p.column].estimated_selectivity(p.op, instance.bindings[p.slot])
    return max(1.0, tab.row_count * sel)


def estimate_cardinality(
    schema: Schema,
    template: QueryTemplate,
    instance: QueryInstance,
    sub: SubPlanKey,
    overrides: Mapping[SubPlanKey, float] | None = None,
) -> float:
    """Independence-assumption estimate; join overrides are returned verbatim."""
    tables = frozenset(sub.table_set)
    unknown = tables - set(template.tables)
    if unknown:
        raise StructureError(f"unknown table(s) {sorted(unknown)}")
    if overrides and sub.is_join and sub in overrides:
        return float(overrides[sub])
    est = 1.0
    for t in sorted(tables):
        est *= estimated_base_cardinality(schema, template, instance, t)
    for e in template.edges_within(tables):
        est *= schema.estimated_join_selectivity(e)
    return max(1.0, est)


class CardinalityOracle:
    """Sub-plan cardinalities for one template, in TRUE or ESTIMATED mode.

    Per-instance results are memoized; the oracle is otherwise stateless.
    """

    TRUE = "TRUE"
    ESTIMATED = "ESTIMATED"

    def __init__(self, schema: Schema, template: QueryTemplate, mode: str = ESTIMATED):
        if mode not in (self.TRUE, self.ESTIMATED):
            raise ValueError(f"unknown mode {mode!r}")
        schema.check_template(template)
        self.schema = schema
        self.template = template
        self.mode = mode
        self._cache: dict[tuple[QueryInstance, SubPlanKey], float] = {}

    def __call__(self, instance: QueryInstance, sub: SubPlanKey, overrides: Mapping[SubPlanKey, float] | None = None) -> float:
        if self.mode == self.TRUE:
            key = (instance, sub)
            if key not in self._cache:
                self._cache[key] = float(true_cardinality(self.schema, self.template, instance, sub))
            return self._cache[key]
        if overrides and sub.is_join and sub in overrides:
            return float(overrides[sub])
        key = (instance, sub)
        if key not in self._cache:
            self._cache[key] = estimate_cardinality(self.schema, self.template, instance, sub)
        return self._cache[key]


# ---------------------------------------------------------------------------
# generation


def zipf_freqs(domain: int, skew: float, rng: np.random.Generator) -> np.ndarray:
    """Zipf-like frequencies over a randomly permuted domain; skew 0 is uniform."""
    ranks = np.arange(1, domain + 1, dtype=float)
    w = ranks ** (-skew)
    w = w / w.sum()
    return w[rng.permutation(domain)]


def quota_sample(n: int, freqs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """n codes whose counts follow ``freqs`` by largest-remainder allocation, shuffled."""
    exact = n * freqs
    counts = np.floor(exact).astype(np.int64)
    short = n - int(counts.sum())
    if short:
        order = np.lexsort((np.arange(len(freqs)), -(exact - counts)))
        counts[order[:short]] += 1
    values = np.repeat(np.arange(len(freqs)), counts)
    return rng.permutation(values)


ATTRIBUTE_KINDS = ("int", "float", "string", "date")


def generate_schema(seed: int, n_tables: int, skew: float, rows: tuple[int, int] = (300, 3000)) -> Schema:
    """Random tree-shaped schema.

    With ``skew > 0`` column frequencies are Zipf-skewed and each table's
    join keys are partially determined by its attribute ``a``, a correlation
    the independence estimator cannot see.
    """
    if not 2 <= n_tables <= 8:
        raise ValueError("n_tables must lie in [2, 8]")
    if skew < 0:
        raise ValueError("skew must be non-negative")
    rng = np.random.default_rng(seed)
    names = [f"t{i}" for i in range(n_tables)]
    edges = []
    for i in range(1, n_tables):
        parent = int(rng.integers(0, i))
        edges.append(JoinEdge(names[parent], names[i], f"k{parent}_{i}"))
    rho = skew / (1.0 + skew)
    key_domains = {e.label: int(rng.integers(20, 120)) for e in edges}
    key_freqs = {lbl: zipf_freqs(d, skew, rng) for lbl, d in key_domains.items()}
    tables = {}
    indexes = set()
    for name in names:
        n = int(rng.integers(rows[0], rows[1] + 1))
        cols: dict[str, Column] = {}
        a_dom = int(rng.integers(10, 60))
        a_freqs = zipf_freqs(a_dom, skew, rng)
        a_vals = quota_sample(n, a_freqs, rng)
        cols["a"] = Column("a", "int", a_dom, a_freqs, a_vals)
        kind = ATTRIBUTE_KINDS[int(rng.integers(0, len(ATTRIBUTE_KINDS)))]
        b_dom = int(rng.integers(10, 80))
        b_freqs = zipf_freqs(b_dom, skew, rng)
        cols["b"] = Column("b", kind, b_dom, b_freqs, quota_sample(n, b_freqs, rng), 0.5 if kind == "float" else 1.0)
        a_rank = np.argsort(np.argsort(-a_freqs, kind="stable"), kind="stable")  # 0 = most frequent
        for e in edges:
            if name not in (e.left, e.right):
                continue
            dom, kf = key_domains[e.label], key_freqs[e.label]
            keys = quota_sample(n, kf, rng)
            if rho > 0:
                # frequent attribute values land on frequent keys
                by_rank = np.argsort(-kf, kind="stable")
                hit = rng.random(n) < rho
                keys = np.where(hit, by_rank[a_rank[a_vals] % dom], keys)
            freqs = np.bincount(keys, minlength=dom) / n
            cols[e.label] = Column(e.label, "key", dom, kf if rho == 0 else freqs, keys)
        for c in ("a", "b"):
            if rng.random() < 0.5:
                indexes.add((name, c))
        tables[name] = Table(name, cols)
    return Schema(tables, tuple(edges), frozenset(indexes), seed, skew)


def random_template(schema: Schema, template_id: str, n_tables: int, seed: int, n_params: int | None = None) -> QueryTemplate:
    """Connected sub-tree of the schema with one parameterized predicate per chosen table."""
    rng = np.random.default_rng(seed)
    n_tables = min(n_tables, len(schema.tables))
    names = sorted(schema.tables)
    chosen = [names[int(rng.integers(0, len(names)))]]
    while len(chosen) < n_tables:
        frontier = sorted(
            {b for e in schema.edges for a, b in ((e.left, e.right), (e.right, e.left)) if a in chosen and b not in chosen}
        )
        chosen.append(frontier[int(rng.integers(0, len(frontier)))])
    edges = tuple(e for e in schema.edges if e.left in chosen and e.right in chosen)
    n_params = n_params or n_tables
    pred_tables = [chosen[i % len(chosen)] for i in range(n_params)]
    preds, specs = [], []
    for slot, t in enumerate(pred_tables):
        col_name = "a" if slot < len(chosen) else "b"
        col = schema.tables[t].columns[col_name]
        op = "<=" if col.kind in ("int", "float", "date") and rng.random() < 0.25 else "="
        preds.append(Predicate(t, col_name, op, slot))
        specs.append(ParamSpec(col.kind, t, col_name))
    return QueryTemplate(template_id, tuple(chosen), edges, tuple(preds), tuple(specs))


def sample_bindings(schema: Schema, template: QueryTemplate, n: int, seed: int) -> list[QueryInstance]:
    """Bindings drawn from actual column values, so equality predicates are non-empty."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        vals = []
        for spec in template.param_specs:
            col = schema.tables[spec.table].columns[spec.column]
            code = int(col.values[int(rng.integers(0, len(col.values)))])
            vals.append(col.decode(code))
        out.append(QueryInstance(template.template_id, tuple(vals)))
    return out
