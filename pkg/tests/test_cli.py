import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from famctl import nn
from famctl.cli import load_experiment, main
from famctl.training import load_checkpoint

TINY = {
    "schema_version": 1,
    "family": "zz",
    "iterations": 3,
    "batch_size": 8,
    "eval_count": 12,
    "n_steps": 8,
    "hyper": {"n_layers": 2, "n_units": 10, "lr": 0.01, "beta": 1.0},
    "duration_hyper": {"n_layers": 1, "n_units": 6, "lr": 0.01, "beta": 1.0},
}


def write_config(tmp_path, name="exp.json", **overrides):
    doc = dict(TINY, out_dir=str(tmp_path / "run"))
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_missing_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


@pytest.mark.parametrize(
    "overrides",
    [{"schema_version": 2}, {"learning_rate": 1.0}, {"eval_seed": 1, "train_seed": 1}, {"family": "not-a-family"},
     {"mode": "shared-T", "duration": 50.0}],
)
def test_invalid_config(tmp_path, overrides, capsys):
    assert main(["train", "--config", str(write_config(tmp_path, **overrides))]) == 2
    assert "error" in capsys.readouterr().err


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    assert main(["train", "--config", str(path)]) == 2


def test_numerical_abort(tmp_path, capsys):
    path = tmp_path / "nan.json"
    doc = dict(TINY, out_dir=str(tmp_path / "run"))
    doc["hyper"] = dict(TINY["hyper"], lr=float("nan"))
    path.write_text(json.dumps(doc))  # Python's json writes NaN literally
    assert main(["train", "--config", str(path)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_zero_iterations(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, iterations=0)), "--workers", "1"]) == 0
    report = json.loads((tmp_path / "run" / "eval_report.json").read_text())
    assert report["count"] == 12
    assert load_checkpoint(tmp_path / "run" / "checkpoint.json").iteration == 0


def test_out_dir_flag_and_env(tmp_path, monkeypatch):
    cfg = str(write_config(tmp_path, iterations=0))
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "checkpoint.json").exists()
    monkeypatch.setenv("FAMCTL_OUT_DIR", str(tmp_path / "env"))
    assert main(["train", "--config", cfg]) == 0
    assert (tmp_path / "env" / "checkpoint.json").exists()


def test_eval_reproduces_training_report(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path)), "--workers", "1"]) == 0
    ck = tmp_path / "run" / "checkpoint.json"
    assert main(["eval", "--checkpoint", str(ck), "--workers", "3"]) == 0
    trained = json.loads((tmp_path / "run" / "eval_report.json").read_text())
    again = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert trained == again
    assert len(read_csv(tmp_path / "run" / "eval.csv")) == 13


def test_eval_count_one(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, iterations=0))]) == 0
    ck = str(tmp_path / "run" / "checkpoint.json")
    assert main(["eval", "--checkpoint", ck, "--count", "1", "--seed", "5"]) == 0
    rows = read_csv(tmp_path / "run" / "eval_seed5.csv")
    assert rows[0] == ["alpha1", "infidelity", "duration"] and len(rows) == 2
    assert main(["eval", "--checkpoint", ck, "--count", "0"]) == 2


def test_eval_other_seed_is_statistically_compatible(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, iterations=5))]) == 0
    ck = str(tmp_path / "run" / "checkpoint.json")
    for seed in (11, 12):
        assert main(["eval", "--checkpoint", ck, "--count", "200", "--seed", str(seed)]) == 0
    a, b = (
        np.array([s["infidelity"] for s in json.loads((tmp_path / "run" / f"eval_seed{s}.json").read_text())["samples"]])
        for s in (11, 12)
    )
    rng = np.random.default_rng(0)
    diffs = [rng.choice(a, a.size).mean() - rng.choice(b, b.size).mean() for _ in range(2000)]
    lo, hi = np.quantile(diffs, [0.005, 0.995])
    assert lo <= 0.0 <= hi


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "checkpoint.json"
    bad.write_text("[1, 2")
    assert main(["eval", "--checkpoint", str(bad)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.json")]) == 2


def test_resume_extends_run(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, iterations=2)), "--workers", "1"]) == 0
    cfg4 = str(write_config(tmp_path, name="exp4.json", iterations=4))
    assert main(["train", "--config", cfg4, "--resume", "--workers", "1"]) == 0
    resumed = load_checkpoint(tmp_path / "run" / "checkpoint.json")
    assert main(["train", "--config", cfg4, "--out-dir", str(tmp_path / "direct"), "--workers", "1"]) == 0
    direct = load_checkpoint(tmp_path / "direct" / "checkpoint.json")
    assert resumed.to_dict() == direct.to_dict()
    assert len(read_csv(tmp_path / "run" / "train_log.csv")) == 5
    other = str(write_config(tmp_path, name="other.json", iterations=4, batch_size=4))
    assert main(["train", "--config", other, "--resume"]) == 2


def test_export_controls(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, mode="per-target-T", duration=2.0))]) == 0
    ck = tmp_path / "run" / "checkpoint.json"
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"alpha": [{"lo": 0.0, "hi": 1.0, "num": 3}], "t_points": 4}))
    assert main(["export-controls", "--checkpoint", str(ck), "--grid", str(grid)]) == 0
    rows = read_csv(tmp_path / "run" / "controls.csv")
    assert rows[0] == ["alpha1", "t", "xx:1,2", "y:1", "y:2", "z:1", "z:2"]
    assert len(rows) == 1 + 12
    durations = read_csv(tmp_path / "run" / "durations.csv")
    assert len(durations) == 4

    state = load_checkpoint(ck)
    alpha = np.array([[float(rows[5][0])]])
    t_total = float(durations[2][1])
    frac = float(rows[5][1]) / t_total
    x = state.model.scaler.control_inputs(alpha, np.array([frac]), np.array([t_total]))
    direct, _ = nn.forward(state.model.net, x)
    np.testing.assert_allclose([float(v) for v in rows[5][2:]], direct[0], rtol=1e-12, atol=1e-15)


def test_export_single_point_and_errors(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, iterations=0))]) == 0
    ck = str(tmp_path / "run" / "checkpoint.json")
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"alpha": [0.5], "t_points": 1}))
    assert main(["export-controls", "--checkpoint", ck, "--grid", str(grid)]) == 0
    assert len(read_csv(tmp_path / "run" / "controls.csv")) == 2
    for bad in ({"alpha": [5.0]}, {"alpha": [0.1, 0.2]}, {"alpha": [0.1], "t_points": 0}, {"beta": 1}):
        grid.write_text(json.dumps(bad))
        assert main(["export-controls", "--checkpoint", ck, "--grid", str(grid)]) == 2


def test_training_config_can_export(tmp_path):
    cfg = write_config(tmp_path, iterations=0, export={"alpha": [[0.1, 0.2]], "t_points": 3})
    assert main(["train", "--config", str(cfg)]) == 0
    assert len(read_csv(tmp_path / "run" / "controls.csv")) == 7


def test_baseline(tmp_path, capsys):
    assert main(["baseline", "--family", "zz", "--framework-time", "1.0", "--count", "50"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["R"] == pytest.approx(out["mean_decomposition_time"])
    assert main(["baseline", "--family", "xx-yy-zz", "--framework-time", "1.0"]) == 2
    assert main(["baseline", "--family", "zz"]) == 2
    circ = tmp_path / "zz.circ"
    circ.write_text("xx:1,2 2*a1\n")
    assert main(["baseline", "--family", "zz", "--framework-time", "1.0", "--circuit", str(circ)]) == 2


def test_baseline_from_checkpoint(tmp_path, capsys):
    assert main(["train", "--config", str(write_config(tmp_path, mode="shared-T", duration=2.5, iterations=0))]) == 0
    capsys.readouterr()
    assert main(["baseline", "--checkpoint", str(tmp_path / "run" / "checkpoint.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["framework_time"] == 2.5
    assert out["R"] == pytest.approx(out["mean_decomposition_time"] / 2.5)


def test_hpsearch(tmp_path):
    base = {k: v for k, v in TINY.items() if k != "schema_version"}
    spec = {"base": base, "trials": 3, "screening_iterations": 1, "screening_eval_count": 6,
            "n_layers": [1, 2], "n_units": [4, 6]}
    path = tmp_path / "search.json"
    path.write_text(json.dumps(spec))
    assert main(["hpsearch", "--config", str(path), "--out-dir", str(tmp_path / "hp")]) == 0
    rows = read_csv(tmp_path / "hp" / "ranked.csv")
    assert len(rows) == 4
    scores = [float(r[6]) for r in rows[1:]]
    assert scores == sorted(scores)
    cfg, _ = load_experiment(tmp_path / "hp" / "winning_config.json")
    assert cfg.hyper.n_layers == int(rows[1][2]) and cfg.iterations == TINY["iterations"]
    path.write_text(json.dumps({"trials": 2, "surprise": 1}))
    assert main(["hpsearch", "--config", str(path)]) == 2


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "famctl.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "export-controls" in out.stdout
    out = subprocess.run([sys.executable, "-m", "famctl.cli", "train"], capture_output=True, text=True)
    assert out.returncode == 2


@pytest.mark.slow
def test_family_ii_smoke_config(tmp_path):
    cfg = write_config(tmp_path, iterations=100, batch_size=32, n_steps=64, hyper={"n_layers": 6, "n_units": 150,
                       "lr": 1e-3, "beta": 2.1}, eval_count=64)
    assert main(["train", "--config", str(cfg)]) == 0
    costs = np.array([float(r[1]) for r in read_csv(tmp_path / "run" / "train_log.csv")[1:]])
    assert len(costs) == 100
    assert costs[-25:].mean() < costs[:25].mean()


def test_shipped_configs_load():
    from pathlib import Path

    from famctl.training import TrainState

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
    assert len(paths) == 10
    for p in paths:
        cfg, _ = load_experiment(p)
        TrainState(cfg)
