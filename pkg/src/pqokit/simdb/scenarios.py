"""Seeded synthetic workloads with known failure modes of the estimator.

Each builder returns a :class:`Scenario`: a schema, one or more templates,
a workload per template and the cost model used for execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..core import JoinEdge, ParamSpec, Predicate, QueryInstance, QueryTemplate, Workload
from .planner import CostModel, SimulatedOptimizer
from .schema import Column, Schema, Table, generate_schema, random_template, sample_bindings


@dataclass
class Scenario:
    name: str
    schema: Schema
    templates: dict[str, QueryTemplate]
    workloads: dict[str, Workload]
    cost_model: CostModel = field(default_factory=CostModel)
    noise_level: float = 0.02
    info: dict = field(default_factory=dict)
    _optimizers: dict = field(default_factory=dict, repr=False)

    @property
    def template(self) -> QueryTemplate:
        return next(iter(self.templates.values()))

    @property
    def workload(self) -> Workload:
        return next(iter(self.workloads.values()))

    def optimizer(self, template_id: str | None = None) -> SimulatedOptimizer:
        tid = template_id or self.template.template_id
        if tid not in self._optimizers:
            self._optimizers[tid] = SimulatedOptimizer(self.schema, self.templates[tid], self.cost_model, self.noise_level)
        return self._optimizers[tid]


def _table(name: str, columns: dict[str, tuple[str, np.ndarray, int]], scale: dict[str, float] | None = None) -> Table:
    scale = scale or {}
    cols = {c: Column.from_codes(c, kind, vals, dom, scale.get(c, 1.0)) for c, (kind, vals, dom) in columns.items()}
    return Table(name, cols)


def _spread(n: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    """n codes covering [lo, hi) as evenly as possible, shuffled."""
    return rng.permutation(lo + np.arange(n) % (hi - lo))


def _chain_template(tid: str, tables: list[str], labels: list[str], preds: list[tuple[str, str, str, str]]) -> QueryTemplate:
    edges = tuple(JoinEdge(a, b, lbl) for a, b, lbl in zip(tables, tables[1:], labels))
    predicates = tuple(Predicate(t, c, op, i) for i, (t, c, op, _) in enumerate(preds))
    specs = tuple(ParamSpec(kind, t, c) for t, c, _, kind in preds)
    return QueryTemplate(tid, tuple(tables), edges, predicates, specs)


# ---------------------------------------------------------------------------


def adversarial_scenario(seed: int = 0, n_instances: int = 20) -> Scenario:
    """Chain r-s-t-u where one attribute value of r lands on a key that s repeats thousands of times.

    For the hot values of ``r.a`` the estimate of ``r JOIN s`` is more than
    100x too small; instance 0 always binds a hot value.
    """
    rng = np.random.default_rng(seed)
    a_dom, hot = 50, 5
    n_r, n_s, n_t, n_u = 2000, 3000, 1500, 600
    r_a = _spread(n_r, 0, a_dom, rng)
    r_k = np.where(r_a < hot, 0, 1 + rng.integers(0, 199, n_r))
    s_k = np.concatenate([np.zeros(2000, dtype=np.int64), _spread(n_s - 2000, 1, 200, rng)])
    s_k = rng.permutation(s_k)
    tables = {
        "r": _table("r", {"a": ("int", r_a, a_dom), "k_rs": ("key", r_k, 200)}),
        "s": _table("s", {"k_rs": ("key", s_k, 200), "k_st": ("key", _spread(n_s, 0, 100, rng), 100)}),
        "t": _table("t", {"k_st": ("key", _spread(n_t, 0, 100, rng), 100), "k_tu": ("key", _spread(n_t, 0, 60, rng), 60)}),
        "u": _table("u", {"k_tu": ("key", _spread(n_u, 0, 60, rng), 60), "b": ("int", _spread(n_u, 0, 30, rng), 30)}),
    }
    edges = (JoinEdge("r", "s", "k_rs"), JoinEdge("s", "t", "k_st"), JoinEdge("t", "u", "k_tu"))
    schema = Schema(tables, edges, frozenset({("r", "a"), ("u", "b")}), seed, None, {"scenario": "adversarial"})
    tpl = _chain_template("adv", ["r", "s", "t", "u"], ["k_rs", "k_st", "k_tu"], [("r", "a", "=", "int"), ("u", "b", "<=", "int")])
    inst = [QueryInstance("adv", (int(rng.integers(0, hot)), int(rng.integers(10, 30))))]
    for _ in range(n_instances - 1):
        inst.append(QueryInstance("adv", (int(rng.integers(0, a_dom)), int(rng.integers(0, 30)))))
    return Scenario("adversarial", schema, {"adv": tpl}, {"adv": Workload("adv", tuple(inst))}, info={"hot_values": list(range(hot))})


def _hotkey_chain(
    rng: np.random.Generator,
    hot: np.ndarray,
    rows_per_value: int,
    hot_repeat: int,
    n_t: int,
    n_u: int,
    string_domain: int,
) -> Schema:
    """Chain r-s-t-u whose first join explodes for the attribute values flagged in ``hot``.

    Rows of ``r`` with a hot ``a`` share one key that ``s`` repeats
    ``hot_repeat`` times; other rows hit keys that appear once in ``s``.
    The estimator only sees uniform columns and a large key domain.
    """
    a_dom = len(hot)
    n_r = a_dom * rows_per_value
    n_keys = 1000
    r_a = _spread(n_r, 0, a_dom, rng)
    r_k = np.where(hot[r_a], 0, 1 + rng.integers(0, n_keys - 1, n_r))
    s_k = rng.permutation(np.concatenate([np.zeros(hot_repeat, dtype=np.int64), np.arange(1, n_keys)]))
    n_s = len(s_k)
    tables = {
        "r": _table("r", {"a": ("int", r_a, a_dom), "k_rs": ("key", r_k, n_keys)}),
        "s": _table("s", {"k_rs": ("key", s_k, n_keys), "k_st": ("key", _spread(n_s, 0, 100, rng), 100)}),
        "t": _table("t", {"k_st": ("key", _spread(n_t, 0, 100, rng), 100), "k_tu": ("key", _spread(n_t, 0, 60, rng), 60)}),
        "u": _table("u", {"k_tu": ("key", _spread(n_u, 0, 60, rng), 60), "c": ("string", _spread(n_u, 0, string_domain, rng), string_domain)}),
    }
    edges = (JoinEdge("r", "s", "k_rs"), JoinEdge("s", "t", "k_st"), JoinEdge("t", "u", "k_tu"))
    return Schema(tables, edges, frozenset({("r", "a")}), None, None)


def _hotkey_template(tid: str) -> QueryTemplate:
    return _chain_template(tid, ["r", "s", "t", "u"], ["k_rs", "k_st", "k_tu"], [("r", "a", "=", "int"), ("u", "c", "=", "string")])


def _hotkey_workload(schema: Schema, tid: str, n: int, a_values: np.ndarray, rng: np.random.Generator) -> Workload:
    col = schema.tables["u"].columns["c"]
    out = []
    for _ in range(n):
        a = int(a_values[int(rng.integers(0, len(a_values)))])
        c = col.decode(int(rng.integers(0, col.domain)))
        out.append(QueryInstance(tid, (a, c)))
    return Workload(tid, tuple(out))


def param_sensitive_scenario(seed: int = 0, n_instances: int = 500, hot_fraction: float = 0.15, **kw) -> Scenario:
    """Two clusters of ``r.a``: low values explode the first join, the rest do not.

    The default plan suits the large cluster; the small cluster wants a
    different plan that in turn is a regression for the large one.
    """
    rng = np.random.default_rng(seed)
    a_dom = 100
    cut = int(round(a_dom * hot_fraction))
    hot = np.arange(a_dom) < cut
    schema = _hotkey_chain(rng, hot, **{**HOTKEY_DEFAULTS, **kw})
    schema.seed, schema.meta = seed, {"scenario": "param_sensitive"}
    tpl = _hotkey_template("ps")
    w = _hotkey_workload(schema, "ps", n_instances, np.arange(a_dom), rng)
    return Scenario("param_sensitive", schema, {"ps": tpl}, {"ps": w}, info={"hot_below": cut})


def ood_scenario(seed: int = 0, n_instances: int = 500, **kw) -> Scenario:
    """The top 20% of ``r.a`` behaves unlike the rest.

    Below the cut the first join explodes and a non-default plan wins; above
    it that plan regresses. Training only on the lower 80% tempts a model to
    extrapolate.
    """
    rng = np.random.default_rng(seed)
    a_dom = 100
    cut = int(a_dom * 0.8)
    hot = np.arange(a_dom) < cut
    schema = _hotkey_chain(rng, hot, **{**HOTKEY_DEFAULTS, **kw})
    schema.seed, schema.meta = seed, {"scenario": "ood"}
    tpl = _hotkey_template("ood")
    w = _hotkey_workload(schema, "ood", n_instances, np.arange(a_dom), rng)
    return Scenario("ood", schema, {"ood": tpl}, {"ood": w}, info={"slot": 0, "holdout_from": cut})


def heavy_tailed_scenario(seed: int = 0, n_instances: int = 300, tail_fraction: float = 0.35, hot_repeat: int = 400, **kw) -> Scenario:
    """Cheap instances plus a slow tail whose first join explodes.

    The tail instances are far slower than the rest under the default plan
    and are the only ones with a better plan to find.
    """
    rng = np.random.default_rng(seed)
    a_dom = 100
    cut = max(1, int(round(a_dom * tail_fraction)))
    hot = np.arange(a_dom) < cut
    schema = _hotkey_chain(rng, hot, **{**HOTKEY_DEFAULTS, "hot_repeat": hot_repeat, **kw})
    schema.seed, schema.meta = seed, {"scenario": "heavy_tailed"}
    tpl = _hotkey_template("tail")
    w = _hotkey_workload(schema, "tail", n_instances, np.arange(a_dom), rng)
    return Scenario("heavy_tailed", schema, {"tail": tpl}, {"tail": w}, info={"hot_below": cut})


def distorted_scenario(
    seed: int = 0, n_templates: int = 4, n_instances: int = 20, n_tables: int = 6, skew: float = 1.0, spread: float = 3.0
) -> Scenario:
    """Random skewed schema, several templates, and hidden per-operator latency distortion.

    Because execution cost differs from what the planner models, even
    true cardinalities do not guarantee the fastest plan.
    """
    schema = generate_schema(seed, n_tables, skew)
    templates, workloads = {}, {}
    for i in range(n_templates):
        tid = f"d{i}"
        sub = 1000 * seed + i
        tpl = random_template(schema, tid, 3 + i % 3, sub)
        templates[tid] = tpl
        workloads[tid] = Workload(tid, tuple(sample_bindings(schema, tpl, n_instances, sub)))
    return Scenario("distorted", schema, templates, workloads, CostModel.with_random_distortion(seed, spread), info={"spread": spread})


def random_scenario(seed: int = 0, n_instances: int = 100, n_tables: int = 5, template_tables: int = 4, skew: float = 1.0) -> Scenario:
    """One random template over a random skewed schema, no latency distortion."""
    schema = generate_schema(seed, n_tables, skew)
    tpl = random_template(schema, "q0", template_tables, seed)
    w = Workload("q0", tuple(sample_bindings(schema, tpl, n_instances, seed)))
    return Scenario("random", schema, {"q0": tpl}, {"q0": w})


HOTKEY_DEFAULTS = dict(rows_per_value=10, hot_repeat=60, n_t=1500, n_u=600, string_domain=20)


SCENARIOS: dict[str, Callable[..., Scenario]] = {
    "adversarial": adversarial_scenario,
    "param_sensitive": param_sensitive_scenario,
    "ood": ood_scenario,
    "heavy_tailed": heavy_tailed_scenario,
    "distorted": distorted_scenario,
    "random": random_scenario,
}


def build_scenario(name: str, seed: int = 0, **kw) -> Scenario:
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return builder(seed, **kw)
