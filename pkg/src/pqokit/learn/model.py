"""Training, persistence and confidence-gated prediction."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..core import FORMAT_VERSION, ExecutionDataset, FormatError, QueryInstance, check_header, config_digest
from .features import FeaturizerState, fit_featurizer
from .labels import build_labels
from .network import (
    Adam,
    NetworkShape,
    SpectralNorm,
    forward,
    init_params,
    laplace_precision,
    loss_and_grads,
    predictive,
    weighted_bce,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 64
    layers: int = 3
    rff_dim: int = 128
    embed_dim: int = 10
    vocab_size: int = 32
    oov_buckets: int = 1
    featurization: str = "values"
    residual: bool = True
    spectral_bound: float = 0.95
    power_iterations: int = 1
    lengthscale: float = 0.25
    beta_init: float = 0.01
    embed_init: float = 0.1
    lr: float = 3e-4
    epochs: int = 1000
    batch_size: int = 32
    l2: float = 0.0
    ridge: float = 1e-4
    likelihood: str = "gaussian"
    tau: float = 0.05
    C: float = 5.0
    D: float = 0.5
    threshold: float = 0.9

    def __post_init__(self):
        if min(self.hidden, self.layers, self.rff_dim, self.embed_dim, self.vocab_size, self.epochs, self.batch_size) < 1:
            raise ValueError("sizes and counts must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.likelihood not in ("logistic", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @classmethod
    def from_json(cls, d: Mapping) -> TrainConfig:
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PlanChoice:
    plan: str | None  # None means fall back to the optimizer's default plan
    confidence: float

    @property
    def fallback(self) -> bool:
        return self.plan is None


@dataclass
class ModelArtifact:
    featurizer: FeaturizerState
    shape: NetworkShape
    params: dict[str, np.ndarray]
    precision: np.ndarray  # (heads, rff, rff)
    plans: tuple[str, ...]  # head order
    config: TrainConfig
    seed: int
    threshold: float
    config_digest: str = ""
    history: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.plans) != self.shape.heads:
            raise ValueError("one output head per cover plan")
        self.covariance = np.linalg.inv(self.precision)

    # -- inference -----------------------------------------------------------

    def scores(self, instances: Sequence[QueryInstance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mean logits, predictive variance, confidence), each (n, heads)."""
        for q in instances:
            q.check(self.featurizer.template)
        x, idx = self.featurizer.transform(instances)
        logits, phi, _ = forward(self.params, x, idx, self.shape.layers, self.config.residual)
        var, conf = predictive(logits, phi, self.covariance)
        return logits, var, conf

    def predict(self, instances: Sequence[QueryInstance], threshold: float | None = None) -> list[PlanChoice]:
        """Most confident plan per instance, or a fallback below ``threshold``.

        A threshold of 1 always falls back, even where the confidence
        rounds to exactly 1 in floating point.
        """
        t = self.threshold if threshold is None else threshold
        if not 0.0 <= t <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        _, _, conf = self.scores(instances)
        out = []
        for row in conf:
            k = int(np.argmax(row))
            c = float(row[k])
            out.append(PlanChoice(self.plans[k] if c >= t and t < 1.0 else None, c))
        return out

    def with_threshold(self, threshold: float) -> ModelArtifact:
        return replace(self, threshold=threshold)

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "model",
            "featurizer": self.featurizer.to_json(),
            "shape": asdict(self.shape),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
            "precision": {"shape": list(self.precision.shape), "data": self.precision.ravel().tolist()},
            "plans": list(self.plans),
            "config": self.config.to_json(),
            "seed": self.seed,
            "threshold": self.threshold,
            "config_digest": self.config_digest,
            "history": self.history,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> ModelArtifact:
        check_header(dict(d), "model")

        def arr(a):
            return np.array(a["data"], dtype=float).reshape(a["shape"])

        shape = dict(d["shape"])
        shape["vocab_sizes"] = tuple(shape["vocab_sizes"])
        return cls(
            FeaturizerState.from_json(d["featurizer"]),
            NetworkShape(**shape),
            {k: arr(v) for k, v in d["params"].items()},
            arr(d["precision"]),
            tuple(d["plans"]),
            TrainConfig.from_json(d["config"]),
            int(d["seed"]),
            float(d["threshold"]),
            d.get("config_digest", ""),
            d.get("history", {}),
            d.get("provenance", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> ModelArtifact:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed model file ({exc.msg})", exc.lineno) from None
        return cls.from_json(d)


def train_model(
    dataset: ExecutionDataset,
    cover_plans: Sequence[str],
    config: TrainConfig | None = None,
    seed: int = 0,
    train: Sequence[int] | None = None,
    schema=None,
    provenance: Mapping | None = None,
    on_step: Callable[[dict[str, np.ndarray], list[float]], None] | None = None,
) -> ModelArtifact:
    """Fit the network on ``train`` (default: every instance) with one head per cover plan.

    ``on_step`` is called after every optimizer step with the live parameters
    and each dense layer's spectral estimate after normalization.
    """
    config = config or TrainConfig()
    plans = tuple(cover_plans)
    if not plans:
        raise ValueError("empty plan cover")
    train = list(range(len(dataset.instances))) if train is None else list(train)
    if not train:
        raise ValueError("no training instances")
    rng = np.random.default_rng(seed)

    feat = fit_featurizer(dataset, train, config.vocab_size, config.embed_dim, config.oov_buckets, config.featurization, schema)
    lm = build_labels(dataset, plans, train, config.tau, config.C, config.D)
    x, idx = feat.transform([dataset.instances[q] for q in train])
    shape = NetworkShape(feat.numeric_dim, tuple(v.size for v in feat.vocabularies), config.embed_dim, config.hidden, config.layers, config.rff_dim, len(plans))
    params = init_params(shape, rng, config.lengthscale, config.beta_init, config.embed_init)
    opt = Adam(params, config.lr)
    sn = SpectralNorm(params, config.layers, config.spectral_bound, rng, config.power_iterations)
    sn.apply(params)

    n = len(train)
    bs = min(config.batch_size, n)
    y, w = lm.labels, lm.weights

    def full_loss() -> float:
        logits, _, _ = forward(params, x, idx, config.layers, config.residual)
        return weighted_bce(logits, y, w)

    losses = [full_loss()]
    spectral_max = 0.0
    for _ in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            b = order[start : start + bs]
            _, g = loss_and_grads(params, x[b], [ix[b] for ix in idx], y[b], w[b], config.layers, config.residual, config.l2)
            opt.step(params, g)
            est = sn.apply(params)
            spectral_max = max(spectral_max, max(est))
            if on_step is not None:
                on_step(params, est)
        losses.append(full_loss())

    logits, phi, _ = forward(params, x, idx, config.layers, config.residual)
    precision = laplace_precision(phi, logits, config.ridge, config.likelihood)
    log.info("trained %d heads on %d instances: loss %.4f -> %.4f", len(plans), n, losses[0], losses[-1])
    return ModelArtifact(
        feat,
        shape,
        params,
        precision,
        plans,
        config,
        seed,
        config.threshold,
        config_digest({"config": config.to_json(), "seed": seed, "plans": list(plans)}),
        {"loss": losses, "spectral_max": spectral_max},
        dict(provenance or {}),
    )
