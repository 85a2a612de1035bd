"""Parameter-value featurization.

Numerics and dates are standardized, strings go through a vocabulary (chosen
by total latency headroom) into learnable embeddings.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import DATE_EPOCH, ExecutionDataset, QueryInstance, QueryTemplate, estimated_latency


@dataclass(frozen=True)
class Vocabulary:
    slot: int
    values: tuple[str, ...]
    oov_buckets: int = 1

    def __post_init__(self):
        if len(set(self.values)) != len(self.values):
            raise ValueError("duplicate vocabulary value")
        if not self.values:
            raise ValueError("vocabulary must hold at least one value")
        if self.oov_buckets < 1:
            raise ValueError("need at least one out-of-vocabulary bucket")
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(self.values)})

    @property
    def size(self) -> int:
        return len(self.values) + self.oov_buckets

    def lookup(self, value: str) -> int:
        i = self._index.get(value)  # type: ignore[attr-defined]
        if i is not None:
            return i
        h = int.from_bytes(hashlib.sha256(str(value).encode()).digest()[:4], "little")
        return len(self.values) + h % self.oov_buckets


def best_latencies(dataset: ExecutionDataset, instances: Sequence[int]) -> dict[int, float]:
    """Per-instance fastest uncensored latency over every recorded plan."""
    out = {}
    for q in instances:
        lats = [estimated_latency(r) for r in dataset.records if r.instance == q and not r.censored]
        out[q] = min(lats) if lats else dataset.default_latency(q)
    return out


def vocabulary_scores(dataset: ExecutionDataset, slot: int, instances: Sequence[int] | None = None) -> dict[str, float]:
    """Total headroom (default minus oracle-best latency) of the instances carrying each value."""
    if dataset.template.param_specs[slot].type != "string":
        raise TypeError(f"parameter {slot} is not string-typed")
    instances = list(range(len(dataset.instances))) if instances is None else list(instances)
    best = best_latencies(dataset, instances)
    scores: dict[str, float] = {}
    for q in instances:
        v = dataset.instances[q].bindings[slot]
        scores[v] = scores.get(v, 0.0) + dataset.default_latency(q) - best[q]
    return scores


def build_vocabulary(
    dataset: ExecutionDataset, slot: int, k: int, instances: Sequence[int] | None = None, oov_buckets: int = 1
) -> Vocabulary:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = vocabulary_scores(dataset, slot, instances)
    ranked = sorted(scores, key=lambda v: (-scores[v], v))
    return Vocabulary(slot, tuple(ranked[:k]), oov_buckets)


def _numeric(spec_type: str, value) -> float:
    if spec_type == "date":
        return float((value - DATE_EPOCH).days)
    return float(value)


@dataclass
class FeaturizerState:
    template: QueryTemplate
    numeric_slots: list[int]
    mean: np.ndarray
    std: np.ndarray
    vocabularies: list[Vocabulary]
    embed_dim: int = 10
    mode: str = "values"
    # selectivity mode: per-slot column statistics (code -> frequency) and float scale
    selectivity_stats: dict = field(default_factory=dict)

    @property
    def numeric_dim(self) -> int:
        return len(self.numeric_slots)

    def transform(self, instances: Sequence[QueryInstance]) -> tuple[np.ndarray, list[np.ndarray]]:
        """(standardized numeric block, one index vector per string slot)."""
        raw = np.array([[self._raw(q, s) for s in self.numeric_slots] for q in instances], dtype=float).reshape(
            len(instances), len(self.numeric_slots)
        )
        x = (raw - self.mean) / self.std
        idx = [np.array([v.lookup(q.bindings[v.slot]) for q in instances], dtype=np.int64) for v in self.vocabularies]
        return x, idx

    def _raw(self, q: QueryInstance, slot: int) -> float:
        spec = self.template.param_specs[slot]
        if self.mode == "selectivity":
            return _log_selectivity(self.selectivity_stats[slot], spec.type, self.template.predicates, slot, q.bindings[slot])
        return _numeric(spec.type, q.bindings[slot])

    def to_json(self) -> dict:
        return {
            "template": self.template.to_json(),
            "numeric_slots": self.numeric_slots,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "vocabularies": [{"slot": v.slot, "values": list(v.values), "oov_buckets": v.oov_buckets} for v in self.vocabularies],
            "embed_dim": self.embed_dim,
            "mode": self.mode,
            "selectivity_stats": {str(k): v for k, v in self.selectivity_stats.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> FeaturizerState:
        return cls(
            QueryTemplate.from_json(d["template"]),
            list(d["numeric_slots"]),
            np.array(d["mean"], dtype=float),
            np.array(d["std"], dtype=float),
            [Vocabulary(v["slot"], tuple(v["values"]), v["oov_buckets"]) for v in d["vocabularies"]],
            d["embed_dim"],
            d["mode"],
            {int(k): v for k, v in d["selectivity_stats"].items()},
        )


def _log_selectivity(stats: dict, spec_type: str, predicates, slot: int, value) -> float:
    """log10 of the estimator's selectivity for the predicate bound to ``slot``."""
    freqs = np.asarray(stats["freqs"])
    op = next(p.op for p in predicates if p.slot == slot)
    if spec_type == "string":
        prefix = stats["prefix"]
        code = int(value[len(prefix):]) if isinstance(value, str) and value.startswith(prefix) and value[len(prefix):].isdigit() else -1
    elif spec_type == "date":
        code = (value - _dt.date.fromisoformat(stats["base"])).days
    else:
        code = float(value) / stats["scale"]
    if op == "=":
        sel = float(freqs[int(code)]) if float(code).is_integer() and 0 <= code < len(freqs) else 0.0
    else:
        sel = float(freqs[: max(0, min(int(math.floor(code)) + 1, len(freqs)))].sum())
    return math.log10(max(sel, 1e-9))


def fit_featurizer(
    dataset: ExecutionDataset,
    train: Sequence[int],
    vocab_size: int = 32,
    embed_dim: int = 10,
    oov_buckets: int = 1,
    mode: str = "values",
    schema=None,
) -> FeaturizerState:
    """Fit normalization statistics and vocabularies on the training instances."""
    template = dataset.template
    if mode not in ("values", "selectivity"):
        raise ValueError(f"unknown featurization mode {mode!r}")
    if mode == "selectivity":
        if schema is None:
            raise ValueError("selectivity featurization needs the schema statistics")
        from ..simdb.schema import DATE_BASE

        stats = {}
        for slot, spec in enumerate(template.param_specs):
            col = schema.tables[spec.table].columns[spec.column]
            stats[slot] = {"freqs": col.stats.tolist(), "scale": col.scale, "prefix": f"{col.name}_", "base": DATE_BASE.isoformat()}
        numeric_slots = list(range(template.m))
        vocabs: list[Vocabulary] = []
    else:
        stats = {}
        numeric_slots = [s for s, spec in enumerate(template.param_specs) if spec.type != "string"]
        vocabs = [
            build_vocabulary(dataset, s, vocab_size, train, oov_buckets)
            for s, spec in enumerate(template.param_specs)
            if spec.type == "string"
        ]
    state = FeaturizerState(template, numeric_slots, np.zeros(len(numeric_slots)), np.ones(len(numeric_slots)), vocabs, embed_dim, mode, stats)
    if numeric_slots:
        raw = np.array([[state._raw(dataset.instances[q], s) for s in numeric_slots] for q in train], dtype=float)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        std[std < 1e-12] = 1.0  # constant column
        state.mean, state.std = mean, std
    return state
