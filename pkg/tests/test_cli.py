import csv
import json
import re

import numpy as np
import pytest

from ecgl.cli import DEFAULTS, default_budget, main
from ecgl.graph_store import load_dataset

FAST = ["--epochs", "5", "--hidden", "16", "--sbm-nodes-per-class", "15"]


@pytest.fixture(autouse=True)
def no_env(monkeypatch):
    monkeypatch.delenv("ECGL_OUTPUT_DIR", raising=False)


def test_run_writes_one_record_per_seed(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", "--sbm-tasks", "3", "--method", "ecgl", "--regime", "task_il",
                 "--seeds", "0,1,2", "--output-dir", str(out), *FAST])
    assert code == 0
    assert sorted(p.name for p in out.glob("run_seed*.json")) == ["run_seed0.json", "run_seed1.json", "run_seed2.json"]
    assert (out / "aggregate.json").exists()
    assert len(list(out.glob("performance_seed*.csv"))) == 3
    with open(out / "timing.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "method" and len(rows) == 4


def test_run_defaults_echo(tmp_path, capsys):
    main(["run", "--sbm-tasks", "2", "--seeds", "0", "--output-dir", str(tmp_path), *FAST])
    printed = capsys.readouterr().out
    assert "budget=1000" in printed
    assert "diversity_ratio=0.25" in printed
    assert "lambda=1.0" in printed
    rec = json.loads((tmp_path / "run_seed0.json").read_text())
    assert rec["config"]["sample_budget"] == 1000
    assert rec["config"]["diversity_ratio"] == 0.25
    assert rec["config"]["train"]["replay_lambda"] == 1.0
    assert DEFAULTS["seeds"] == [0, 1, 2, 3, 4]


def test_budget_scale_classes():
    assert default_budget(19_793) == 1000
    assert default_budget(169_343) == 3000
    assert default_budget(227_853) == 5000
    assert default_budget(2_449_028) == 5000


def test_run_byte_identical(tmp_path):
    args = ["run", "--sbm-tasks", "2", "--seeds", "3", *FAST, "--budget", "5"]
    main(args + ["--output-dir", str(tmp_path / "a")])
    main(args + ["--output-dir", str(tmp_path / "b")])
    a = (tmp_path / "a" / "run_seed3.json").read_bytes()
    b = (tmp_path / "b" / "run_seed3.json").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "aggregate.json").read_bytes() == (tmp_path / "b" / "aggregate.json").read_bytes()


def test_aggregate_matches_per_seed_files(tmp_path):
    main(["run", "--sbm-tasks", "2", "--seeds", "0,1,2", "--output-dir", str(tmp_path), *FAST, "--budget", "4"])
    per_seed = [json.loads((tmp_path / f"run_seed{s}.json").read_text()) for s in range(3)]
    agg = json.loads((tmp_path / "aggregate.json").read_text())
    aa = [r["average_accuracy"][-1] for r in per_seed]
    af = [r["average_forgetting"][-1] for r in per_seed]
    assert agg["final"]["aa_mean"] == pytest.approx(np.mean(aa), abs=0)
    assert agg["final"]["aa_std"] == pytest.approx(np.std(aa), abs=0)
    assert agg["final"]["af_mean"] == pytest.approx(np.mean(af), abs=0)


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sbm_tasks": 2, "epochs": 3, "hidden": [8], "budget": 6,
                               "seeds": [1], "regime": "class_il", "sbm_nodes_per_class": 10}))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--budget", "3", "--output-dir", str(out)]) == 0
    rec = json.loads((out / "run_seed1.json").read_text())
    assert rec["config"]["sample_budget"] == 3
    assert rec["config"]["regime"] == "class_il"
    assert rec["config"]["train"]["epochs"] == 3


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("ECGL_OUTPUT_DIR", str(tmp_path / "env"))
    main(["run", "--sbm-tasks", "1", "--seeds", "0", "--output-dir", str(tmp_path / "flag"), *FAST])
    assert (tmp_path / "env" / "run_seed0.json").exists()


def test_run_from_dataset_file(tmp_path):
    data = tmp_path / "d.txt"
    assert main(["gen", "--out", str(data), "--sbm-tasks", "2", "--sbm-nodes-per-class", "12"]) == 0
    out = tmp_path / "o"
    assert main(["run", "--dataset", str(data), "--seeds", "0", "--method", "joint",
                 "--output-dir", str(out), "--epochs", "3", "--hidden", "8"]) == 0
    assert (out / "run_seed0.json").exists()


def test_gen_then_load(tmp_path):
    p = tmp_path / "g.txt"
    assert main(["gen", "--out", str(p), "--sbm-tasks", "3"]) == 0
    g, tasks = load_dataset(p)
    tasks.validate_against(g)
    assert len(tasks) == 3


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    main(["gen", "--out", str(a), "--sbm-seed", "11"])
    main(["gen", "--out", str(b), "--sbm-seed", "11"])
    assert a.read_bytes() == b.read_bytes()


def test_gen_product_like_task_structure(tmp_path):
    p = tmp_path / "p.txt"
    main(["gen", "--out", str(p), "--sbm-tasks", "23", "--sbm-classes-per-task", "2",
          "--sbm-nodes-per-class", "4", "--sbm-p-intra", "0.3"])
    _, tasks = load_dataset(p)
    assert len(tasks) == 23
    assert tasks.num_classes == 46


def test_validate(tmp_path, capsys):
    p = tmp_path / "g.txt"
    main(["gen", "--out", str(p), "--sbm-tasks", "2"])
    assert main(["validate", str(p)]) == 0
    assert "ok" in capsys.readouterr().out
    bad = tmp_path / "bad.txt"
    bad.write_text("NODE 0 0 0 1\n")
    assert main(["validate", str(bad)]) == 3
    assert "error[data]" in capsys.readouterr().err


def test_config_error_exit(tmp_path, capsys):
    code = main(["run", "--sbm-tasks", "1", "--diversity-ratio", "2.0", "--seeds", "0",
                 "--output-dir", str(tmp_path), *FAST])
    assert code == 2
    assert "error[config]" in capsys.readouterr().err


def test_unwritable_gen_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub" / "d.txt")]) == 2


def test_bench_single_epoch(tmp_path, capsys):
    out = tmp_path / "b"
    code = main(["bench", "--sbm-tasks", "1", "--sbm-nodes-per-class", "20", "--epochs", "1",
                 "--hidden", "8", "--seeds", "0", "--output-dir", str(out)])
    assert code == 0
    with open(out / "bench_timing.csv") as fh:
        rows = list(csv.reader(fh))
    body = {r[0]: r for r in rows[1:]}
    assert body["ecgl"][3] == "1" and body["ecgl"][6] == "1"
    assert body["ecgl_gcn_trainer"][3] == "1" and body["ecgl_gcn_trainer"][6] == "1"
    assert re.fullmatch(r"\d+\.\d\dx", body["Improv."][1])
    summary = json.loads((out / "bench_summary.json").read_text())
    assert summary["epochs"] == 1
