"""File-to-file pipeline stages and the end-to-end runner.

Every stage reads only the files it is given and writes its outputs with
the configuration digest in their provenance, so any stage can be rerun
or replaced in isolation.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .collect import CollectionPolicy, PlanCover, collect_training_data
from .core import (
    FORMAT_VERSION,
    ExecutionDataset,
    FormatError,
    config_digest,
    export_dataset,
    import_dataset,
    load_workload,
    save_workload,
    split_indices,
)
from .eval import MetricsReport, evaluate, write_instance_csv
from .learn import ModelArtifact, TrainConfig, train_model
from .rce import CandidateSet, RceParams, workload_candidate_generation
from .simdb.planner import CostModel, SimulatedOptimizer
from .simdb.scenarios import SCENARIOS, build_scenario
from .simdb.schema import Schema

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

STAGES = ("gen", "candidates", "collect", "train", "evaluate")

ARTIFACTS = {
    "schema": "schema.jsonl",
    "workload": "workload.jsonl",
    "candidates": "candidates.jsonl",
    "dataset": "dataset.jsonl",
    "cover": "cover.json",
    "collect_report": "collect_report.json",
    "model": "model.json",
    "metrics": "metrics.json",
    "metrics_table": "metrics.txt",
    "instances_csv": "instances.csv",
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")

    def to_json(self) -> dict:
        return {"error": "stage_failure", "stage": self.stage, "type": type(self.cause).__name__, "message": str(self.cause)}


def _nested(cls, raw: Any, name: str, seed: int):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    d = dict(raw)
    if "seed" in allowed:
        d.setdefault("seed", seed)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    scenario: str = "param_sensitive"
    scenario_params: dict = field(default_factory=dict)
    template: str | None = None
    rce: RceParams = field(default_factory=RceParams)
    collection: CollectionPolicy = field(default_factory=CollectionPolicy)
    model: TrainConfig = field(default_factory=TrainConfig)
    train_fraction: float = 0.8
    output_dir: str = "out"
    write_csv: bool = True

    @classmethod
    def from_json(cls, d: Any) -> PipelineConfig:
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        if d.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported format_version {d.get('format_version')!r} (expected {FORMAT_VERSION})")
        known = {f.name for f in fields(cls)} | {"format_version"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        scenario = d.get("scenario", "param_sensitive")
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
        params = d.get("scenario_params", {})
        if not isinstance(params, Mapping):
            raise ConfigError("scenario_params must be an object")
        frac = d.get("train_fraction", 0.8)
        if not isinstance(frac, (int, float)) or not 0 < frac < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        return cls(
            seed=seed,
            scenario=scenario,
            scenario_params=dict(params),
            template=d.get("template"),
            rce=_nested(RceParams, d.get("rce"), "rce", seed),
            collection=_nested(CollectionPolicy, d.get("collection"), "collection", seed),
            model=_nested(TrainConfig, d.get("model"), "model", seed),
            train_fraction=float(frac),
            output_dir=str(d.get("output_dir", "out")),
            write_csv=bool(d.get("write_csv", True)),
        )

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_json(d)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "scenario": self.scenario,
            "scenario_params": self.scenario_params,
            "template": self.template,
            "rce": self.rce.to_json(),
            "collection": self.collection.to_json(),
            "model": self.model.to_json(),
            "train_fraction": self.train_fraction,
            "output_dir": self.output_dir,
            "write_csv": self.write_csv,
        }

    def digest(self) -> str:
        """Hash of everything that affects results; the output location is excluded."""
        d = self.to_json()
        d.pop("output_dir")
        d.pop("write_csv")
        return config_digest(d)

    def paths(self, output_dir: str | Path | None = None) -> dict[str, Path]:
        root = Path(output_dir or self.output_dir)
        return {k: root / v for k, v in ARTIFACTS.items()}


# ---------------------------------------------------------------------------
# executor description stored alongside the schema


def attach_executor(schema: Schema, cost_model: CostModel, noise_level: float) -> None:
    schema.meta["executor"] = {"cost_model": cost_model.to_json(), "noise_level": noise_level}


def executor_for(schema: Schema, template) -> SimulatedOptimizer:
    spec = schema.meta.get("executor", {})
    cm = CostModel.from_json(spec["cost_model"]) if "cost_model" in spec else CostModel()
    return SimulatedOptimizer(schema, template, cm, float(spec.get("noise_level", 0.02)))


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# stages


def stage_gen(cfg: PipelineConfig, schema_path: Path, workload_path: Path) -> None:
    sc = build_scenario(cfg.scenario, cfg.seed, **cfg.scenario_params)
    tid = cfg.template or sc.template.template_id
    if tid not in sc.templates:
        raise ValueError(f"scenario {cfg.scenario!r} has no template {tid!r}; available: {sorted(sc.templates)}")
    attach_executor(sc.schema, sc.cost_model, sc.noise_level)
    sc.schema.meta["provenance"] = {"config_digest": cfg.digest()}
    sc.schema.save(schema_path)
    save_workload(sc.workloads[tid], sc.templates[tid], workload_path, {"config_digest": cfg.digest()})


def stage_candidates(schema_path: Path, workload_path: Path, params: RceParams, out: Path, jobs: int = 1, provenance: dict | None = None) -> CandidateSet:
    schema = Schema.load(schema_path)
    template, w = load_workload(workload_path)
    cs = workload_candidate_generation(w, executor_for(schema, template), params, jobs)
    cs.save(out, params, provenance)
    return cs


def stage_collect(
    schema_path: Path,
    workload_path: Path,
    plans_path: Path,
    policy: CollectionPolicy,
    out: Path,
    cover_out: Path,
    report_out: Path | None = None,
    provenance: dict | None = None,
) -> tuple[ExecutionDataset, PlanCover]:
    schema = Schema.load(schema_path)
    template, w = load_workload(workload_path)
    cs = CandidateSet.load(plans_path)
    prov = {**(provenance or {}), "policy": policy.to_json()}
    ds, cover, stats = collect_training_data(w, cs, executor_for(schema, template), policy, prov)
    export_dataset(ds, out)
    cover_json = cover.to_json()
    cover_json["provenance"] = dict(provenance or {})
    _write_json(cover_out, cover_json)
    if report_out is not None:
        _write_json(
            report_out,
            {
                "cover_size": len(cover),
                "coverage": cover.coverage,
                "candidates": len(cs),
                "instances": len(w),
                "executions": stats.executions,
                "executions_per_phase": stats.per_phase,
                "censored_records": stats.censored_records,
                "simulated_ms": stats.simulated_ms,
                "full_matrix_executions": len(w) * len(cs) * policy.repeats,
                "provenance": dict(provenance or {}),
            },
        )
    return ds, cover


def stage_train(
    dataset_path: Path,
    cover_path: Path,
    config: TrainConfig,
    seed: int,
    train_fraction: float,
    out: Path,
    schema_path: Path | None = None,
    provenance: dict | None = None,
) -> ModelArtifact:
    ds = import_dataset(dataset_path)
    cover = PlanCover.from_json(json.loads(Path(cover_path).read_text()))
    train, _ = split_indices(len(ds.instances), train_fraction, seed)
    schema = Schema.load(schema_path) if schema_path else None
    model = train_model(ds, cover.plans, config, seed, train, schema, provenance)
    model.save(out)
    return model


def stage_evaluate(
    dataset_path: Path,
    cover_path: Path,
    model_path: Path,
    seed: int,
    train_fraction: float,
    out_json: Path,
    out_table: Path | None = None,
    out_csv: Path | None = None,
    threshold: float | None = None,
    provenance: dict | None = None,
) -> MetricsReport:
    ds = import_dataset(dataset_path)
    cover = PlanCover.from_json(json.loads(Path(cover_path).read_text()))
    model = ModelArtifact.load(model_path)
    _, test = split_indices(len(ds.instances), train_fraction, seed)
    choices = model.predict([ds.instances[q] for q in test], threshold)
    n_plans = len(ds.plans)
    bootstrap = [q for q in range(len(ds.instances)) if len(ds.plans_for(q)) == n_plans]
    report = evaluate(ds, choices, cover.plans, test, bootstrap)
    report.extra.update(
        {
            "threshold": model.threshold if threshold is None else threshold,
            "split": "test",
            "provenance": dict(provenance or {}),
        }
    )
    out_json.write_text(report.dumps())
    if out_table is not None:
        out_table.write_text(report.table())
    if out_csv is not None:
        write_instance_csv(out_csv, ds, choices, test)
    return report


# ---------------------------------------------------------------------------


def run_stage(cfg: PipelineConfig, stage: str, output_dir: str | Path | None = None, jobs: int = 1) -> None:
    p = cfg.paths(output_dir)
    prov = {"config_digest": cfg.digest()}
    if stage == "gen":
        stage_gen(cfg, p["schema"], p["workload"])
    elif stage == "candidates":
        stage_candidates(p["schema"], p["workload"], cfg.rce, p["candidates"], jobs, prov)
    elif stage == "collect":
        stage_collect(p["schema"], p["workload"], p["candidates"], cfg.collection, p["dataset"], p["cover"], p["collect_report"], prov)
    elif stage == "train":
        stage_train(p["dataset"], p["cover"], cfg.model, cfg.seed, cfg.train_fraction, p["model"], p["schema"], prov)
    elif stage == "evaluate":
        stage_evaluate(
            p["dataset"],
            p["cover"],
            p["model"],
            cfg.seed,
            cfg.train_fraction,
            p["metrics"],
            p["metrics_table"],
            p["instances_csv"] if cfg.write_csv else None,
            provenance=prov,
        )
    else:
        raise ValueError(f"unknown stage {stage!r}")


def run_pipeline(cfg: PipelineConfig, output_dir: str | Path | None = None, jobs: int = 1) -> int:
    """Run every stage in order; returns an exit status and never raises for stage failures."""
    root = Path(output_dir or cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    for stage in STAGES:
        t0 = time.perf_counter()
        try:
            run_stage(cfg, stage, root, jobs)
        except (OSError, ValueError, FormatError, KeyError, RuntimeError, ArithmeticError) as exc:
            err = StageError(stage, exc)
            log.error("%s", json.dumps(err.to_json(), sort_keys=True))
            return EXIT_STAGE
        log.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
    return EXIT_OK
