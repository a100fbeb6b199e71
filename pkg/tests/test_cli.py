import csv
import hashlib
import json

import pytest
import yaml

from mmflow.cli import main
from mmflow.config import DEFAULTS, RunConfig, overrides_from_flags, parse_assignment
from mmflow.errors import ConfigError
from mmflow.training import TrainLog

TINY = {"model": {"depth": 2, "hidden": 32, "heads": 2, "text_dim": 16, "freq_dim": 32},
        "train": {"batch": 2, "encoder_dim": 16, "lr": 1e-3},
        "distill": {"steps": 2, "batch": 2, "teacher_nfe": 3}}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["gen-data", "--out", str(root / "data"), "--n", "40", "--seed", "7"]) == 0
    return root


# --- config ---------------------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.load()
    assert cfg == DEFAULTS and cfg["train"]["lambda_repa"] == 0.5
    (tmp_path / "c.yaml").write_text("train:\n  steps: 7\n")
    cfg = RunConfig.load(tmp_path / "c.yaml", {"train": {"lr": 1}})
    assert cfg["train"]["steps"] == 7 and cfg["train"]["lr"] == 1.0
    assert cfg.hash() != RunConfig.load().hash()


@pytest.mark.parametrize("bad", [{"train": {"stepz": 1}}, {"nope": {}}, {"train": {"steps": "ten"}},
                                 {"train": 3}, {"eval": {"normalize": 1}}])
def test_config_rejects_bad_input(bad):
    with pytest.raises(ConfigError):
        RunConfig.load(None, bad)


def test_config_dump_roundtrip(tmp_path):
    cfg = RunConfig.load(None, {"data": {"n": 5}})
    cfg.dump(tmp_path / "c.yaml")
    assert RunConfig.load(tmp_path / "c.yaml") == cfg


def test_flag_helpers():
    assert overrides_from_flags([("a.b", 1), ("a.c", None)]) == {"a": {"b": 1}}
    assert parse_assignment("train.lr=0.5") == ("train.lr", 0.5)
    with pytest.raises(ConfigError):
        parse_assignment("train.lr")


# --- commands ---------------------------------------------------------------------


def test_help_documents_every_key(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for sec, keys in DEFAULTS.items():
        for k in keys:
            assert f"{sec}.{k}" in out


def test_gen_data_is_deterministic(workspace, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--n", "40", "--seed", "7"]) == 0
    assert sha(tmp_path / "again" / "manifest.jsonl") == sha(workspace / "data" / "manifest.jsonl")


@pytest.mark.parametrize("argv", [
    ["gen-data", "--out", "x", "--defect-rate", "2.0"],
    ["gen-data", "--out", "x", "--set", "data.bogus=1"],
    ["gen-data", "--out", "x", "--n", "abc"],
    ["train", "--manifest", "m", "--out", "o"],  # --seed is mandatory
    ["sample", "--checkpoint", "c", "--out", "o", "--nfe", "4"],
    ["frobnicate"],
])
def test_config_errors_exit_two(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_runtime_failure_exits_one(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o"),
                 "--seed", "0"]) == 1


def test_curate_writes_weights(workspace, capsys):
    out = workspace / "w.csv"
    assert main(["curate", "--manifest", str(workspace / "data" / "manifest.jsonl"), "--out", str(out),
                 "--set", "data.cluster_k=3", "--query", "red circle", "--boost", "0.5"]) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 40 and sum(float(r["weight"]) for r in rows) == pytest.approx(1.0)
    assert json.loads(capsys.readouterr().out.strip())["total"] == 40


def _train(ws, out, *extra):
    return main(["train", "--config", str(ws / "tiny.yaml"), "--manifest", str(ws / "data" / "manifest.jsonl"),
                 "--out", str(out), "--seed", "3", *extra])


def test_train_lambda_zero_and_resume(workspace):
    assert _train(workspace, workspace / "r0", "--steps", "3", "--lambda-repa", "0") == 0
    assert all(r["repa_loss"] == 0 for r in TrainLog.read(workspace / "r0" / "train_log.csv"))

    assert _train(workspace, workspace / "full", "--steps", "5", "--set", "train.checkpoint_every=3") == 0
    full = TrainLog.read(workspace / "full" / "train_log.csv")
    assert [r["step"] for r in full] == [1, 2, 3, 4, 5] and full[0]["repa_loss"] > 0
    assert _train(workspace, workspace / "resumed", "--steps", "5",
                  "--resume", str(workspace / "full" / "checkpoint_000003.zip")) == 0
    resumed = TrainLog.read(workspace / "resumed" / "train_log.csv")
    assert [r["step"] for r in resumed] == [4, 5]
    for a, b in zip(full[3:], resumed):
        assert abs(a["total"] - b["total"]) < 1e-6


def test_train_is_reproducible(workspace, tmp_path):
    assert _train(workspace, tmp_path / "a", "--steps", "2") == 0
    assert _train(workspace, tmp_path / "b", "--steps", "2") == 0
    assert sha(tmp_path / "a" / "checkpoint.zip") == sha(tmp_path / "b" / "checkpoint.zip")


def test_sample_and_distill(workspace):
    ckpt = workspace / "r0" / "checkpoint.zip"
    if not ckpt.exists():
        assert _train(workspace, workspace / "r0", "--steps", "2") == 0
    out = workspace / "s"
    for nfe in ("50", "4"):
        assert main(["sample", "--checkpoint", str(ckpt), "--out", str(out), "--nfe", nfe, "--seed", "1",
                     "--n", "2", "--manifest", str(workspace / "data" / "manifest.jsonl")]) == 0
    meta = json.loads((out / "samples.json").read_text())
    assert meta["nfe"] == 4 and meta["seed"] == 1 and len(meta["files"]) == 2
    assert (out / meta["files"][0]).stat().st_size == 32 * 32 * 3 * 4
    with open(out / "nfe_quality.csv") as f:
        assert [r["nfe"] for r in csv.DictReader(f)] == ["50", "4"]

    assert main(["distill", "--config", str(workspace / "tiny.yaml"), "--teacher", str(ckpt),
                 "--manifest", str(workspace / "data" / "manifest.jsonl"), "--out", str(workspace / "d"),
                 "--seed", "0", "--nfe-student", "2"]) == 0
    assert main(["sample", "--checkpoint", str(workspace / "d" / "student.zip"), "--out", str(workspace / "ds"),
                 "--nfe", "2", "--seed", "1", "--n", "1"]) == 0
    meta = json.loads((workspace / "ds" / "samples.json").read_text())
    assert meta["kind"] == "student" and meta["timesteps"] == [1.0, 0.5, 0.0]


def test_eval_text_command(tmp_path, capsys):
    (tmp_path / "t.jsonl").write_text(json.dumps({"id": "w", "target": "HELLO", "rendered": "HELO",
                                                  "available": True}) + "\n")
    assert main(["eval-text", "--input", str(tmp_path / "t.jsonl"), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "w,80.000000,80.000000"
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["mean_R_a"] == 80.0 and summary["availability"] == 100.0


def test_arena_command(tmp_path):
    lines = [json.dumps({"model_a": f"m{i % 4}", "model_b": "best", "winner": "best", "timestamp": i})
             for i in range(100)]
    (tmp_path / "b.jsonl").write_text("\n".join(lines))
    assert main(["arena", "--battles", str(tmp_path / "b.jsonl"), "--out", str(tmp_path / "lb.csv")]) == 0
    with open(tmp_path / "lb.csv") as f:
        assert next(csv.DictReader(f))["model"] == "best"
