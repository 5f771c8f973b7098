import json
import subprocess
import sys

import numpy as np
import pytest

from arrowcd.cli import main, read_table, DataError
from arrowcd.graphs import graph_from_json, is_acyclic
from arrowcd.factorized import EdgeBeliefs

SMOKE_TRAIN = {
    "iterations": 3,
    "batch_size": 2,
    "validation_tasks": 2,
    "checkpoint_interval": 2,
    "encoder": {"d": 8, "blocks": 1, "heads": 2, "ffn_mult": 2, "m": 2, "hidden_mult_skeleton": 2},
    "tasks": {"n_range": [10, 20], "p_range": [2, 4], "sem_families": {"linear": 1.0},
              "noise_families": {"normal": 1.0}},
}


def _tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()
            and p.name != "run_manifest.json"}


def test_generate_deterministic_and_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--count", "3", "--out", str(a), "--seed", "5"]) == 0
    assert main(["generate", "--count", "3", "--out", str(b), "--seed", "5"]) == 0
    assert _tree_bytes(a) == _tree_bytes(b)
    assert sorted(p.name for p in a.iterdir()) == ["run_manifest.json", "task_000000", "task_000001", "task_000002"]
    m = json.loads((a / "run_manifest.json").read_text())
    assert m["command"] == "generate" and m["seed"] == 5 and m["config"]["seed"] == 5


def test_generate_zero_count(tmp_path):
    assert main(["generate", "--count", "0", "--out", str(tmp_path / "z")]) == 0
    assert [p.name for p in (tmp_path / "z").iterdir()] == ["run_manifest.json"]


def test_generate_ood_preset(tmp_path):
    out = tmp_path / "g"
    assert main(["generate", "--count", "1", "--out", str(out), "--ood", "gamma-noise"]) == 0
    m = json.loads((out / "run_manifest.json").read_text())
    assert m["config"]["noise_families"] == {"gamma": 1.0}


def test_generate_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"p_rnage": [2, 5]}))
    assert main(["generate", "--config", str(cfg), "--count", "1", "--out", str(tmp_path / "o")]) == 2
    assert "p_rnage" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "train.json"
    cfg.write_text(json.dumps(SMOKE_TRAIN))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run"), "--progress", "0"]) == 0
    return root, cfg


def test_train_outputs(trained):
    root, _ = trained
    run = root / "run"
    assert (run / "final.bin").exists() and (run / "run_manifest.json").exists()
    header = (run / "train.csv").read_text().splitlines()[0]
    assert header == "iteration,train_nll,wall_ms"
    assert (run / "val.csv").read_text().splitlines()[0] == "iteration,val_nll,nshd,f1,ap"


def test_train_resume_continues_numbering(trained, tmp_path):
    root, cfg = trained
    more = dict(SMOKE_TRAIN, iterations=5)
    cfg2 = tmp_path / "more.json"
    cfg2.write_text(json.dumps(more))
    run = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--progress", "0"]) == 0
    assert main(["train", "--config", str(cfg2), "--out", str(run), "--resume", "--progress", "0"]) == 0
    its = [int(line.split(",")[0]) for line in (run / "train.csv").read_text().splitlines()[1:]]
    assert its == [0, 1, 2, 3, 4]


def test_predict_and_eval(trained, tmp_path):
    root, _ = trained
    model = root / "run" / "final.bin"
    tasks = tmp_path / "tasks"
    assert main(["generate", "--count", "2", "--out", str(tasks), "--seed", "1",
                 "--config", str(_task_cfg(tmp_path))]) == 0
    data = tasks / "task_000000" / "data.csv"
    out = tmp_path / "pred" / "graph.json"
    assert main(["predict", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    g = graph_from_json(out.read_text())
    assert g.p == np.loadtxt(data, delimiter=",", ndmin=2).shape[1] and is_acyclic(g)
    beliefs = EdgeBeliefs.from_json((tmp_path / "pred" / "graph_beliefs.json").read_text())
    assert beliefs.p == g.p
    first = out.read_bytes()
    assert main(["predict", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    assert out.read_bytes() == first

    report = tmp_path / "report.csv"
    assert main(["eval", "--model", str(model), "--tasks", str(tasks), "--out", str(report)]) == 0
    rows = report.read_text().splitlines()
    assert rows[0].startswith("task,nshd,f1,ap,runtime_seconds")
    assert [r.split(",")[0] for r in rows[1:]] == ["task_000000", "task_000001", "mean", "stderr"]


def _task_cfg(tmp_path):
    path = tmp_path / "tasks.json"
    path.write_text(json.dumps({"n_range": [20, 40], "p_range": [2, 4]}))
    return path


def test_predict_rejects_bad_cells(trained, tmp_path, capsys):
    root, _ = trained
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1.0,2.0\n3.0,oops\n")
    code = main(["predict", "--model", str(root / "run" / "final.bin"), "--data", str(bad),
                 "--out", str(tmp_path / "g.json")])
    assert code == 4
    err = capsys.readouterr().err
    assert "row 2" in err and "column 2" in err


def test_predict_rejects_too_many_columns(trained, tmp_path):
    root, _ = trained
    wide = tmp_path / "wide.csv"
    np.savetxt(wide, np.random.default_rng(0).normal(size=(20, 9)), delimiter=",")
    assert main(["predict", "--model", str(root / "run" / "final.bin"), "--data", str(wide),
                 "--out", str(tmp_path / "g.json")]) == 4


def test_read_table_header_and_values(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("x,y\n1,2\n3,4.5\n")
    np.testing.assert_array_equal(read_table(f), [[1, 2], [3, 4.5]])
    f.write_text("1,2\n3\n")
    with pytest.raises(DataError):
        read_table(f)


def test_check_suite_reports(tmp_path, capsys):
    assert main(["check", "--suite", "metrics", "--out", str(tmp_path)]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert lines and all(r["passed"] and r["anchor"] and r["suite"] == "metrics" for r in lines)
    assert (tmp_path / "check_report.json").exists()


def test_unknown_suite_is_usage_error():
    r = subprocess.run([sys.executable, "-m", "arrowcd.cli", "check", "--suite", "nope"], capture_output=True)
    assert r.returncode == 2
