import csv
import hashlib
import json
from pathlib import Path

import pytest

from metacate.cli import main
from metacate.experiment import summary_from_raw


def digest(paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def tree(d, skip=("train_log.jsonl",)):
    return sorted(p for p in Path(d).rglob("*") if p.is_file() and p.name not in skip)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--tasks", "10", "--per-task", "150", "--out", str(data), "--seed", "3"]) == 0
    assert main(["label", "--data", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "train"), "--epochs", "12",
                 "--ns", "6", "--nq", "20", "--seed", "1"]) == 0
    assert main(["eval", "--data", str(data), "--checkpoint", str(root / "train" / "checkpoint.json"),
                 "--ns", "6", "--repeats", "2", "--out", str(root / "eval"), "--baselines", "mean,tl,sl"]) == 0
    return root


def test_gen_writes_suite_and_refuses_reuse(pipeline, capsys):
    data = pipeline / "data"
    assert len(list(data.glob("task_*.csv"))) - len(list(data.glob("*.labels.csv"))) == 10
    assert main(["gen", "--tasks", "10", "--per-task", "150", "--out", str(data)]) == 2
    assert "--force" in capsys.readouterr().err


def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--tasks", "4", "--per-task", "60", "--out", str(tmp_path / name), "--seed", "9"]) == 0
    assert digest(tree(tmp_path / "a")) == digest(tree(tmp_path / "b"))


def test_label_is_idempotent_and_complete(pipeline):
    data = pipeline / "data"
    before = {p: p.stat().st_mtime_ns for p in data.glob("*.labels.*")}
    assert main(["label", "--data", str(data)]) == 0
    assert before == {p: p.stat().st_mtime_ns for p in data.glob("*.labels.*")}
    for labels in data.glob("*.labels.csv"):
        n_rows = sum(1 for _ in open(str(labels).replace(".labels", ""))) - 1
        assert sum(1 for _ in open(labels)) - 1 == n_rows


def test_train_needs_labels(tmp_path, capsys):
    assert main(["gen", "--tasks", "3", "--per-task", "60", "--out", str(tmp_path / "d")]) == 0
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "t")]) == 2
    assert "metacate label" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["label", "--data", str(tmp_path / "missing")]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["gen", "--out"]) == 2
    capsys.readouterr()


def test_label_reports_degenerate_tasks(tmp_path, capsys):
    d = tmp_path / "bad"
    d.mkdir()
    rows = ["x_0,y,a"] + [f"{i},0,1" for i in range(30)] + ["0,0,0", "1,0,0"]
    (d / "lopsided.csv").write_text("\n".join(rows) + "\n")
    assert main(["label", "--data", str(d)]) == 1
    assert "lopsided" in capsys.readouterr().err


def test_train_outputs(pipeline):
    out = pipeline / "train"
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["n_support"] == 3 and cfg["train"]["max_epochs"] == 12
    ckpt = json.loads((out / "checkpoint.json").read_text())
    assert ckpt["meta"]["learner"] == "dr"
    assert len((out / "train_log.jsonl").read_text().splitlines()) <= 12


def test_train_config_file_and_overrides(pipeline, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learner": "ra", "max_epochs": 3, "batch_size": 4}))
    out = tmp_path / "t"
    assert main(["train", "--data", str(pipeline / "data"), "--config", str(cfg), "--out", str(out),
                 "--learner", "plugin"]) == 0
    snap = json.loads((out / "config.json").read_text())["train"]
    assert snap["learner"] == "plugin" and snap["batch_size"] == 4 and snap["max_epochs"] == 3
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--data", str(pipeline / "data"), "--config", str(cfg), "--out", str(out)]) == 2


def test_eval_summary_regenerates_from_raw(pipeline, capsys):
    out = pipeline / "eval"
    with open(out / "summary.csv") as fh:
        stored = {(r["method"], int(r["n_support"])): r for r in csv.DictReader(fh)}
    assert set(m for m, _ in stored) == {"dr", "mean", "tl", "sl"}
    for row in summary_from_raw(out / "raw.csv"):
        s = stored[(row["method"], row["n_support"])]
        assert float(s["mean"]) == row["mean"] and float(s["se"]) == row["se"]


def test_eval_dimension_mismatch(pipeline, tmp_path, capsys):
    other = tmp_path / "narrow"
    other.mkdir()
    rows = ["x_0,y,a,true_cate"] + [f"{i % 7},{i % 3},{i % 2},0" for i in range(40)]
    (other / "t.csv").write_text("\n".join(rows) + "\n")
    code = main(["eval", "--data", str(other), "--checkpoint", str(pipeline / "train" / "checkpoint.json"),
                 "--out", str(tmp_path / "e"), "--tasks", "all"])
    assert code == 1
    assert "features" in capsys.readouterr().err


def test_threads_env_fallback(pipeline, monkeypatch):
    monkeypatch.setenv("METACATE_THREADS", "nope")
    assert main(["label", "--data", str(pipeline / "data")]) == 2
    monkeypatch.setenv("METACATE_THREADS", "2")
    assert main(["label", "--data", str(pipeline / "data")]) == 0


def test_every_stage_is_byte_deterministic(pipeline, tmp_path):
    """Rerunning gen/label/train/eval with the same seeds reproduces every primary output."""
    data = tmp_path / "data"
    assert main(["gen", "--tasks", "10", "--per-task", "150", "--out", str(data), "--seed", "3"]) == 0
    assert main(["label", "--data", str(data)]) == 0
    assert digest(tree(data)) == digest(tree(pipeline / "data"))
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "train"), "--epochs", "12",
                 "--ns", "6", "--nq", "20", "--seed", "1"]) == 0
    a = [p for p in tree(tmp_path / "train") if p.name != "config.json"]
    b = [p for p in tree(pipeline / "train") if p.name != "config.json"]
    assert digest(a) == digest(b)
    assert main(["eval", "--data", str(data), "--checkpoint", str(tmp_path / "train" / "checkpoint.json"),
                 "--ns", "6", "--repeats", "2", "--out", str(tmp_path / "eval"), "--baselines", "mean,tl,sl"]) == 0
    for name in ("summary.csv", "raw.csv"):
        assert (tmp_path / "eval" / name).read_bytes() == (pipeline / "eval" / name).read_bytes()
