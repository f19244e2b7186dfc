import json
import subprocess
import sys

import numpy as np
import pytest

from dmfkit.cli import main
from dmfkit.dynamics import Sample, Trajectory
from dmfkit.model import Problem, WeightStack, product, save_checkpoint, save_problem

TINY = {
    "n": 10,
    "rank": 1,
    "depth": 2,
    "std": 0.1,
    "sampling_rates": [1.0],
    "trials": 1,
    "methods": ["dmf"],
    "optimizer": {"max_iters": 400, "record_every": 10},
}


def write_json(path, data):
    path.write_text(json.dumps(data, indent=2))
    return path


def write_traj(path, losses):
    Trajectory([Sample(10 * i, float(v), [1.0], 1e-3, 0.0, 0.0) for i, v in enumerate(losses)]).to_csv(path)
    return path


def staircase():
    levels = []
    for k in range(3):
        levels += [-float(k)] * 60 + list(-k - np.arange(1, 11) / 10)
    levels += [-3.0] * 60
    return 10.0 ** np.array(levels)


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2
    assert "absent.json" in capsys.readouterr().err


def test_run_tiny_config(tmp_path, capsys):
    cfg = write_json(tmp_path / "tiny.json", TINY)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["method"] == "dmf" and summary["rate"] == 1.0 and "certified" in summary
    rows = (out / "trials.csv").read_text().splitlines()
    assert len(rows) == 2
    first = (out / "trials.csv").read_bytes()
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "trials.csv").read_bytes() == first


def test_run_baseline_ignores_optimizer_block(tmp_path, capsys, caplog):
    cfg = write_json(tmp_path / "tiny.json", TINY)
    assert main(["run", "--config", str(cfg), "--method", "nnm", "--out", str(tmp_path / "o")]) == 0
    assert "optimizer block" in caplog.text
    assert json.loads(capsys.readouterr().out)["method"] == "nnm"


def test_warnings_go_to_stderr(tmp_path):
    cfg = write_json(tmp_path / "tiny.json", TINY)
    cmd = [sys.executable, "-m", "dmfkit", "run", "--config", str(cfg), "--method", "omf",
           "--out", str(tmp_path / "o")]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0
    assert "optimizer block" in proc.stderr
    assert json.loads(proc.stdout)["method"] == "omf"


def test_run_solver_failure_exit_3(tmp_path):
    data = dict(TINY, nnm={"step": 3.0, "tol": 1e-12, "max_iters": 5000, "lam_grid": [1e-6]})
    cfg = write_json(tmp_path / "bad.json", data)
    assert main(["run", "--config", str(cfg), "--method", "nnm", "--out", str(tmp_path / "o")]) == 3


def test_output_dir_from_environment(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "tiny.json", dict(TINY, methods=["omf"]))
    monkeypatch.setenv("DMFKIT_OUT", str(tmp_path / "env_out"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env_out" / "trials.csv").exists()


def test_sweep_jobs_and_outputs(tmp_path, capsys):
    data = dict(TINY, sampling_rates=[0.6, 1.0], trials=2, methods=["dmf", "omf"])
    cfg = write_json(tmp_path / "s.json", data)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert (tmp_path / "a" / "trials.csv").read_bytes() == (tmp_path / "b" / "trials.csv").read_bytes()
    agg = json.loads((tmp_path / "a" / "sweep.json").read_text())["aggregates"]
    assert {(a["method"], a["sampling_rate"]) for a in agg} == {
        (m, r) for m in ("dmf", "omf") for r in (0.6, 1.0)
    }
    for line in capsys.readouterr().out.splitlines():
        json.loads(line)


def test_sweep_empty_rates_exit_2(tmp_path):
    cfg = write_json(tmp_path / "s.json", dict(TINY, sampling_rates=[]))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_analyze_fixtures(tmp_path, capsys):
    assert main(["analyze", "--trajectory", str(write_traj(tmp_path / "s.csv", staircase()))]) == 0
    assert json.loads(capsys.readouterr().out)["stage_count"] == 3
    assert main(["analyze", "--trajectory", str(write_traj(tmp_path / "c.csv", np.ones(40)))]) == 0
    assert json.loads(capsys.readouterr().out)["stage_count"] == 0


def test_analyze_malformed_csv_exit_2(tmp_path, capsys):
    path = write_traj(tmp_path / "t.csv", np.ones(20))
    lines = path.read_text().splitlines()
    lines[5] = "50,1.0,1.0"
    path.write_text("\n".join(lines) + "\n")
    assert main(["analyze", "--trajectory", str(path)]) == 2
    assert "t.csv:6" in capsys.readouterr().err


def test_analyze_reproduces_stored_report(tmp_path, capsys):
    cfg = write_json(tmp_path / "tiny.json", TINY)
    out = tmp_path / "out"
    main(["run", "--config", str(cfg), "--out", str(out)])
    trial = json.loads(capsys.readouterr().out)["trial_id"]
    assert main(["analyze", "--trajectory", str(out / "trajectories" / f"{trial}.csv")]) == 0
    assert capsys.readouterr().out == (out / "spe" / f"{trial}.json").read_text()


def checkpoint(tmp_path, stack, target):
    save_checkpoint(stack, tmp_path / "ck")
    save_problem(Problem.from_matrix(target), tmp_path / "p.json")
    return ["--checkpoint", str(tmp_path / "ck"), "--problem", str(tmp_path / "p.json")]


def test_certify_exit_codes(tmp_path, capsys):
    rng = np.random.default_rng(0)
    fit = WeightStack([np.eye(3) + 0.1 * rng.standard_normal((3, 3)) for _ in range(2)])
    assert main(["certify", *checkpoint(tmp_path / "a", fit, product(fit))]) == 0
    cert = json.loads(capsys.readouterr().out)
    assert cert["is_second_order"] and cert["grad_norm"] == 0.0

    saddle = checkpoint(tmp_path / "b", WeightStack([[[0.0]], [[0.0]]]), [[1.0]])
    assert main(["certify", *saddle]) == 4
    assert json.loads(capsys.readouterr().out)["lambda_min_estimate"] == pytest.approx(-1.0, rel=0.05)
    # a huge gradient tolerance cannot hide negative curvature, both together can
    assert main(["certify", *saddle, "--tau-g", "1e9"]) == 4
    assert main(["certify", *saddle, "--tau-g", "1e9", "--tau-h", "1e9"]) == 0

    convex = checkpoint(tmp_path / "c", WeightStack([rng.standard_normal((3, 3))]), rng.standard_normal((3, 3)))
    assert main(["certify", *convex, "--tau-g", "1e9"]) == 0


def test_certify_dimension_mismatch_exit_2(tmp_path, capsys):
    args = checkpoint(tmp_path, WeightStack([np.zeros((2, 2))]), np.zeros((3, 3)))
    assert main(["certify", *args]) == 2
    assert "problem is (3, 3)" in capsys.readouterr().err


def test_tune_prints_json(tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", dict(TINY, methods=["nnm"], tune_seeds=1))
    assert main(["tune", "--config", str(cfg)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "lam" in out["1.0"]["nnm"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dmfkit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "dmfkit", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""
