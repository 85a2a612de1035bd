import json
import time

import pytest

from pqokit.cli import main
from pqokit.core import import_dataset, load_workload
from pqokit.learn import ModelArtifact
from pqokit.pipeline import ARTIFACTS, EXIT_CONFIG, EXIT_OK, EXIT_STAGE, ConfigError, PipelineConfig, run_pipeline

SMALL = {
    "format_version": 1,
    "seed": 1,
    "scenario": "param_sensitive",
    "scenario_params": {"n_instances": 60},
    "rce": {"generations": 1, "samples_per_generation": 3, "perturbations_per_plan": 3},
    "collection": {"bootstrap_instances": 20},
    "model": {"epochs": 20},
}


def write_config(path, **over):
    d = {**SMALL, **over}
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = write_config(root / "cfg.json")
    out = root / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == EXIT_OK
    return cfg, out


def test_run_writes_every_artifact_with_the_digest(small_run):
    cfg_path, out = small_run
    digest = PipelineConfig.load(cfg_path).digest()
    for name in ARTIFACTS.values():
        assert (out / name).exists(), name
    assert import_dataset(out / "dataset.jsonl").provenance["config_digest"] == digest
    assert json.loads((out / "cover.json").read_text())["provenance"]["config_digest"] == digest
    assert json.loads((out / "metrics.json").read_text())["extra"]["provenance"]["config_digest"] == digest
    assert ModelArtifact.load(out / "model.json").provenance["config_digest"] == digest
    assert json.loads((out / "collect_report.json").read_text())["provenance"]["config_digest"] == digest
    assert json.loads((out / "schema.jsonl").read_text().splitlines()[0])["meta"]["provenance"]["config_digest"] == digest
    first = json.loads((out / "workload.jsonl").read_text().splitlines()[0])
    assert first["provenance"]["config_digest"] == digest
    first = json.loads((out / "candidates.jsonl").read_text().splitlines()[0])
    assert first["provenance"]["config_digest"] == digest


def test_subcommand_chain_matches_run(small_run, tmp_path):
    cfg_path, out = small_run
    cfg = PipelineConfig.load(cfg_path)
    d = cfg.digest()
    p = {k: str(tmp_path / v) for k, v in ARTIFACTS.items()}
    for name, obj in (("rce", cfg.rce), ("coll", cfg.collection), ("model", cfg.model)):
        (tmp_path / f"{name}.json").write_text(json.dumps(obj.to_json()))
    steps = [
        ["gen", str(cfg_path), "--out", str(tmp_path)],
        ["candidates", "--schema", p["schema"], "--workload", p["workload"], "--params", str(tmp_path / "rce.json"), "--out", p["candidates"], "--digest", d],
        ["collect", "--schema", p["schema"], "--workload", p["workload"], "--plans", p["candidates"], "--policy", str(tmp_path / "coll.json"), "--out", p["dataset"], "--digest", d],
        ["train", "--dataset", p["dataset"], "--cover", p["cover"], "--params", str(tmp_path / "model.json"), "--schema", p["schema"], "--seed", "1", "--out", p["model"], "--digest", d],
        ["evaluate", "--dataset", p["dataset"], "--cover", p["cover"], "--model", p["model"], "--seed", "1", "--out", p["metrics"], "--csv", p["instances_csv"], "--digest", d],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, argv
    for key in ARTIFACTS:
        assert (tmp_path / ARTIFACTS[key]).read_bytes() == (out / ARTIFACTS[key]).read_bytes(), key


def test_predict_is_fast_and_well_formed(small_run, tmp_path):
    _, out = small_run
    model = ModelArtifact.load(out / "model.json")
    assert (model.config.hidden, model.config.layers, model.config.rff_dim) == (64, 3, 128)
    target = tmp_path / "pred.jsonl"
    assert main(["predict", "--model", str(out / "model.json"), "--workload", str(out / "workload.jsonl"), "--out", str(target)]) == EXIT_OK
    rows = [json.loads(line) for line in target.read_text().splitlines()]
    _, w = load_workload(out / "workload.jsonl")
    assert len(rows) == len(w)
    assert all(0.0 <= r["confidence"] <= 1.0 and (r["plan"] is None or r["plan"] in model.plans) for r in rows)
    # per-instance cost, batched and one at a time
    qs = list(w.instances) * 20
    t0 = time.perf_counter()
    model.predict(qs)
    assert (time.perf_counter() - t0) / len(qs) < 1e-3
    t0 = time.perf_counter()
    for q in w.instances:
        model.predict([q])
    assert (time.perf_counter() - t0) / len(w) < 1e-3


def test_offline_training_on_imported_dataset(small_run, tmp_path):
    # only the dataset and cover files: no schema, workload or executor
    _, out = small_run
    target = tmp_path / "m.json"
    assert main(["train", "--dataset", str(out / "dataset.jsonl"), "--cover", str(out / "cover.json"), "--out", str(target)]) == EXIT_OK
    assert ModelArtifact.load(target).plans


def test_zero_generations_gives_unit_oracle_speedup(tmp_path):
    cfg = write_config(tmp_path / "g0.json", rce={"generations": 0})
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
    m = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert m["s_opt"] == 1.0


@pytest.mark.parametrize(
    "bad",
    [
        {"format_version": 7},
        {"scenario": "nope"},
        {"seed": "x"},
        {"train_fraction": 1.5},
        {"rce": {"generations": -1}},
        {"collection": {"timeout_slack": 0.5}},
        {"model": {"threshold": 2}},
        {"model": {"no_such_knob": 1}},
        {"surprise": 1},
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, bad):
    cfg = write_config(tmp_path / "bad.json", **bad)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config_error"


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "c.json").write_text("{oops")
    assert main(["run", str(tmp_path / "c.json")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        PipelineConfig.from_json([])


def test_stage_failure_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", template="no_such_template")
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_STAGE
    assert run_pipeline(PipelineConfig.load(cfg), tmp_path / "o2") == EXIT_STAGE
    assert main(["train", "--dataset", str(tmp_path / "absent.jsonl"), "--cover", str(tmp_path / "c.json"), "--out", str(tmp_path / "m")]) == EXIT_STAGE
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err == {**err, "error": "stage_failure", "stage": "train"}


def test_config_round_trip_and_digest():
    cfg = PipelineConfig.from_json(SMALL)
    again = PipelineConfig.from_json(cfg.to_json())
    assert again == cfg and again.digest() == cfg.digest()
    moved = PipelineConfig.from_json({**cfg.to_json(), "output_dir": "elsewhere"})
    assert moved.digest() == cfg.digest()
    assert cfg.rce.seed == 1 and cfg.model.epochs == 20
    assert PipelineConfig.from_json({**SMALL, "seed": 2}).digest() != cfg.digest()


def test_demo_config_is_valid():
    from pathlib import Path

    cfg = PipelineConfig.load(Path(__file__).resolve().parents[1] / "configs" / "demo.json")
    assert cfg.scenario == "param_sensitive" and cfg.rce.generations == 3
