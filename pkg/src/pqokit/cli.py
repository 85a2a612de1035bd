"""Command-line entry point: ``pqokit <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .collect import CollectionPolicy
from .core import FormatError, load_workload
from .learn import ModelArtifact, TrainConfig
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_STAGE,
    STAGES,
    ConfigError,
    PipelineConfig,
    StageError,
    run_pipeline,
    stage_candidates,
    stage_collect,
    stage_evaluate,
    stage_gen,
    stage_train,
)
from .rce import RceParams

log = logging.getLogger("pqokit")


def _load_params(cls, path: str | None, name: str, seed: int | None = None):
    if path is None:
        d = {}
    else:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {name} file {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{name} file must hold a JSON object")
    d.pop("format_version", None)
    if seed is not None and "seed" in {f for f in cls.__dataclass_fields__}:
        d.setdefault("seed", seed)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _provenance(args) -> dict:
    return {"config_digest": args.digest} if getattr(args, "digest", None) else {}


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config)
    t0 = time.perf_counter()
    status = run_pipeline(cfg, args.out, args.jobs)
    if status == EXIT_OK:
        out = Path(args.out or cfg.output_dir)
        sys.stdout.write((out / "metrics.txt").read_text())
        log.info("pipeline finished in %.1fs, artifacts in %s", time.perf_counter() - t0, out)
    return status


def cmd_gen(args) -> int:
    cfg = PipelineConfig.load(args.config)
    p = cfg.paths(args.out)
    p["schema"].parent.mkdir(parents=True, exist_ok=True)
    stage_gen(cfg, Path(args.schema) if args.schema else p["schema"], Path(args.workload) if args.workload else p["workload"])
    return EXIT_OK


def cmd_candidates(args) -> int:
    params = _load_params(RceParams, args.params, "rce params")
    cs = stage_candidates(Path(args.schema), Path(args.workload), params, Path(args.out), args.jobs, _provenance(args))
    print(f"{len(cs)} candidate plans -> {args.out}")
    return EXIT_OK


def cmd_collect(args) -> int:
    policy = _load_params(CollectionPolicy, args.policy, "collection policy")
    out = Path(args.out)
    cover_out = Path(args.cover) if args.cover else out.with_name("cover.json")
    report = Path(args.report) if args.report else out.with_name("collect_report.json")
    ds, cover = stage_collect(Path(args.schema), Path(args.workload), Path(args.plans), policy, out, cover_out, report, _provenance(args))
    print(f"{len(ds.records)} records, cover of {len(cover)} plans -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_params(TrainConfig, args.params, "model config")
    model = stage_train(
        Path(args.dataset),
        Path(args.cover),
        config,
        args.seed,
        args.train_fraction,
        Path(args.out),
        Path(args.schema) if args.schema else None,
        _provenance(args),
    )
    print(f"model with {len(model.plans)} heads -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    table = Path(args.table) if args.table else out.with_suffix(".txt")
    report = stage_evaluate(
        Path(args.dataset),
        Path(args.cover),
        Path(args.model),
        args.seed,
        args.train_fraction,
        out,
        table,
        Path(args.csv) if args.csv else None,
        args.threshold,
        _provenance(args),
    )
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = ModelArtifact.load(args.model)
    _, w = load_workload(args.workload)
    t0 = time.perf_counter()
    choices = model.predict(list(w.instances), args.threshold)
    elapsed = time.perf_counter() - t0
    lines = [json.dumps({"instance": i, "plan": c.plan, "confidence": c.confidence}) for i, c in enumerate(choices)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("predicted %d instances in %.3f ms each", len(choices), 1000 * elapsed / max(len(choices), 1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pqokit", description="Parametric query optimization over a simulated database.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def jobs(p):
        p.add_argument("--jobs", type=int, default=1, help="worker cap for candidate generation")

    def digest(p):
        p.add_argument("--digest", help="config digest recorded in the output's provenance")

    def split(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--train-fraction", type=float, default=0.8)

    p = sub.add_parser("run", help="all stages from one config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides the config)")
    jobs(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen", help="write the scenario's schema and workload")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--schema")
    p.add_argument("--workload")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("candidates", help="candidate plans by cardinality perturbation")
    p.add_argument("--schema", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--params", help="JSON object of generation parameters")
    p.add_argument("--out", required=True)
    jobs(p)
    digest(p)
    p.set_defaults(func=cmd_candidates)

    p = sub.add_parser("collect", help="execute candidates and compute the plan cover")
    p.add_argument("--schema", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--plans", required=True)
    p.add_argument("--policy", help="JSON object of collection settings")
    p.add_argument("--out", required=True)
    p.add_argument("--cover")
    p.add_argument("--report")
    jobs(p)
    digest(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="fit the plan predictor on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--cover", required=True)
    p.add_argument("--params", help="JSON object of model settings")
    p.add_argument("--schema", help="needed only for selectivity features")
    p.add_argument("--out", required=True)
    split(p)
    digest(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a model on the test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--cover", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--table", help="plain-text table (default: next to the JSON)")
    p.add_argument("--csv", help="per-instance improvements")
    p.add_argument("--threshold", type=float)
    split(p)
    digest(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="choose a plan per workload instance")
    p.add_argument("--model", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config_error", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, FormatError, KeyError, RuntimeError, ArithmeticError) as exc:
        stage = args.command if args.command in STAGES else "predict"
        print(json.dumps(StageError(stage, exc).to_json()), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
