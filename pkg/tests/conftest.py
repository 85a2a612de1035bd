import pytest

from pqokit.core import Workload
from pqokit.simdb import SimulatedOptimizer, generate_schema, random_template, sample_bindings


def tiny_setup(seed: int, n_tables: int = 3, rows=(4, 9), n_instances: int = 6, skew: float = 1.0, noise: float = 0.0, cost_model=None):
    """Schema small enough for brute-force row enumeration."""
    schema = generate_schema(seed, n_tables, skew, rows)
    tpl = random_template(schema, "t", n_tables, seed)
    w = Workload("t", tuple(sample_bindings(schema, tpl, n_instances, seed)))
    return schema, tpl, w, SimulatedOptimizer(schema, tpl, cost_model, noise)


@pytest.fixture
def tiny():
    return tiny_setup(0)


def latency_dataset(lat, bindings=None, spec_type="int", censored=None):
    """Dataset over a two-table template from an (instances x plans) latency matrix.

    Plan column 0 is every instance's default. NaN entries get no record;
    ``censored`` marks entries recorded as timed out at their value.
    """
    import numpy as np

    from pqokit.core import ExecutionDataset, ExecutionRecord, Join, JoinEdge, ParamSpec, Predicate, QueryInstance, QueryTemplate, Scan, plan_fingerprint

    lat = np.asarray(lat, dtype=float)
    n, k = lat.shape
    tpl = QueryTemplate("ab", ("a", "b"), (JoinEdge("a", "b", "k"),), (Predicate("a", "x", "=", 0),), (ParamSpec(spec_type, "a", "x"),))
    shapes = [(j, s1, s2) for j in ("HashJoin", "MergeJoin", "NestedLoop") for s1 in ("SeqScan", "IndexScan") for s2 in ("SeqScan", "IndexScan")]
    shapes += [(j, s1, s2, "swap") for j, s1, s2 in shapes]
    plans = {}
    for shape in shapes[:k]:
        left, right = (Scan("a", shape[1]), Scan("b", shape[2]))
        p = Join(shape[0], right, left) if len(shape) == 4 else Join(shape[0], left, right)
        plans[plan_fingerprint(p)] = p
    fps = list(plans)
    bindings = list(range(n)) if bindings is None else list(bindings)
    inst = tuple(QueryInstance("ab", (b,)) for b in bindings)
    cens = np.zeros_like(lat, dtype=bool) if censored is None else np.asarray(censored, dtype=bool)
    recs = []
    for i in range(n):
        for j in range(k):
            if np.isnan(lat[i, j]):
                continue
            if cens[i, j]:
                recs.append(ExecutionRecord(i, fps[j], (float(lat[i, j]),), censored=True, timeout_ms=float(lat[i, j])))
            else:
                recs.append(ExecutionRecord(i, fps[j], (float(lat[i, j]),)))
    return ExecutionDataset(tpl, inst, plans, tuple([fps[0]] * n), tuple(recs)), fps


ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
