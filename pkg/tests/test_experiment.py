import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmfkit.experiment import (
    ConfigError,
    ExperimentConfig,
    OptimizerConfig,
    add_noise_snr,
    aggregate,
    config_from_dict,
    gen_low_rank,
    gen_mask,
    load_config,
    make_problem,
    measured_snr,
    read_trials_csv,
    rlne,
    run_trial,
    sweep,
    trial_seed,
)


def tiny_config(**kw):
    base = dict(n=8, rank=2, depth=2, std=0.1, sampling_rates=[0.6], trials=2,
                methods=["nnm", "omf"], tune_seeds=2)
    base.update(kw)
    cfg = ExperimentConfig(**base)
    cfg.nnm.max_iters = 300
    cfg.nnm.lam_grid = [1e-3, 1e-2, 1e-1]
    return cfg


# --- data ----------------------------------------------------------------------


def test_gen_low_rank_ranks():
    s = np.linalg.svd(gen_low_rank(100, 6, 0), compute_uv=False)
    assert s[5] > 1e-8 * s[0] and s[6] < 1e-10 * s[0]
    assert np.linalg.matrix_rank(gen_low_rank(7, 7, 1)) == 7
    x = gen_low_rank(6, 1, 2)
    scale = np.abs(x).max() ** 2
    for i in range(5):
        for j in range(5):
            minor = x[i, j] * x[i + 1, j + 1] - x[i, j + 1] * x[i + 1, j]
            assert abs(minor) <= 1e-9 * scale
    with pytest.raises(ValueError):
        gen_low_rank(3, 4, 0)


def test_snr_examples():
    x = gen_low_rank(20, 2, 0)
    n0 = add_noise_snr(x, 0.0, 1) - x
    assert np.linalg.norm(n0) == pytest.approx(np.linalg.norm(x), rel=1e-9)
    assert np.allclose(add_noise_snr(x, 1e9, 1), x, rtol=0, atol=1e-12 * np.abs(x).max())
    assert measured_snr(x, add_noise_snr(x, 22.0, 3) - x) == pytest.approx(22.0, abs=1e-6)
    with pytest.raises(ValueError):
        add_noise_snr(np.zeros((2, 2)), 10.0, 0)


@given(st.floats(-20, 80), st.integers(0, 2**31))
def test_snr_exact_by_construction(snr, seed):
    x = np.random.default_rng(seed).standard_normal((5, 4))
    assert measured_snr(x, add_noise_snr(x, snr, seed + 1) - x) == pytest.approx(snr, abs=1e-6)


def test_gen_mask_counts():
    assert gen_mask(5, 1.0, 0).observed.all()
    m = gen_mask(100, 0.3, 1)
    assert m.count == 3000
    other = gen_mask(100, 0.3, 2)
    assert other.count == 3000 and not np.array_equal(m.observed, other.observed)
    with pytest.raises(ValueError):
        gen_mask(5, 0.0, 0)


@given(st.integers(1, 30), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_gen_mask_count_exact(n, rate, seed):
    assert gen_mask(n, rate, seed).count == round(rate * n * n)


def test_rlne_examples(np_rng):
    x = np_rng.standard_normal((4, 4))
    assert rlne(x, x) == 0.0
    assert rlne(x, np.zeros_like(x)) == pytest.approx(1.0)
    assert rlne(x, 2 * x) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rlne(np.zeros((2, 2)), x[:2, :2])


@given(st.integers(0, 2**31))
def test_rlne_rotation_invariant(seed):
    g = np.random.default_rng(seed)
    x, y = g.standard_normal((5, 5)), g.standard_normal((5, 5))
    q, _ = np.linalg.qr(g.standard_normal((5, 5)))
    p, _ = np.linalg.qr(g.standard_normal((5, 5)))
    assert rlne(q @ x @ p, q @ y @ p) == pytest.approx(rlne(x, y), abs=1e-9)


# --- configs ---------------------------------------------------------------------


def test_load_json_and_toml(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(
        {"n": 10, "rank": 2, "depth": 3, "sampling_rates": [0.5], "record_every": 7,
         "baselines": {"omf": {"ridge_grid": [0.0]}}, "optimizer": {"eta": 0.01}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.optimizer.record_every == 7 and cfg.optimizer.eta == 0.01
    assert cfg.omf.ridge_grid == [0.0] and "optimizer" in cfg.given
    (tmp_path / "c.toml").write_text(
        'n = 10\nrank = 2\nsampling_rates = [0.5, 0.7]\n\n[optimizer]\nalgorithm = "spe_rmsprop"\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.sampling_rates == [0.5, 0.7] and cfg.optimizer.algorithm == "spe_rmsprop"


@pytest.mark.parametrize(
    "text, line",
    [
        ('{\n  "n": 10,\n  "rank": 20\n}', 3),
        ('{\n  "n": 10,\n  "sampling_rates": []\n}', 3),
        ('{\n  "n": 10,\n  "bogus": 1\n}', 3),
        ('{\n  "n": 10,\n  "optimizer": {\n    "algorithm": "adam"\n  }\n}', 4),
        ('{\n  "n": 10,\n  "rank": \n}', 4),
    ],
)
def test_config_errors_name_line(tmp_path, text, line):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(ConfigError, match=rf"bad.json:{line}:"):
        load_config(p)


def test_config_toml_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("n = 10\nrank = = 2\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_config(p)


def test_missing_config_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(tmp_path / "nope.json")


def test_config_validation():
    for bad in ({"trials": 0}, {"methods": ["svd"]}, {"sampling_rates": [1.5]}, {"std": 0.0}):
        with pytest.raises(ConfigError):
            config_from_dict(bad)
    assert ExperimentConfig().optimizer == OptimizerConfig()
    assert OptimizerConfig().state().r == pytest.approx(1e-2)


# --- trials ------------------------------------------------------------------------


def test_seed_hierarchy():
    cfg = tiny_config()
    seeds = {trial_seed(cfg.seed, m, r, t) for m in ("dmf", "nnm") for r in (0.4, 0.6) for t in range(3)}
    assert len(seeds) == 12
    a = make_problem(cfg, 0.6, 1)
    b = make_problem(tiny_config(trials=50), 0.6, 1)
    assert np.array_equal(a.target, b.target) and np.array_equal(a.mask.observed, b.mask.observed)
    assert not np.array_equal(make_problem(cfg, 0.6, 0).target, a.target)
    tuning = make_problem(cfg, 0.6, 1, namespace="tune")
    assert not np.array_equal(tuning.ground_truth, a.ground_truth)


def test_noisy_problem_has_requested_snr():
    cfg = tiny_config(snr_db=22.0, sampling_rates=[1.0])
    prob = make_problem(cfg, 1.0, 0)
    assert measured_snr(prob.ground_truth, prob.target - prob.ground_truth) == pytest.approx(22.0)


def test_dmf_trial_small_end_to_end(tmp_path):
    cfg = ExperimentConfig(n=2, rank=1, depth=2, std=0.1, sampling_rates=[1.0], methods=["dmf"])
    cfg.optimizer.max_iters = 20_000
    cfg.optimizer.record_every = 100
    res = run_trial(cfg, "dmf", 1.0, 0, out_dir=tmp_path)
    assert res.status == "ok" and res.rlne < 1e-3
    assert res.stage_count is not None and res.cert is not None
    assert (tmp_path / "trajectories" / f"{res.trial_id}.csv").exists()
    assert (tmp_path / "spe" / f"{res.trial_id}.json").exists()
    assert (tmp_path / "cert" / f"{res.trial_id}.json").exists()


def test_omf_trial_exact_model():
    cfg = tiny_config(sampling_rates=[1.0])
    res = run_trial(cfg, "omf", 1.0, 0, {"ridge": 0.0})
    assert res.status == "ok" and res.rlne < 1e-4 and res.iters >= 1
    assert len(res.sv_final) == 8 and res.sv_final[2] < 1e-8 * res.sv_final[0]


def test_solver_failure_is_recorded():
    cfg = tiny_config()
    cfg.nnm.step = 3.0
    cfg.nnm.tol = 1e-12
    cfg.nnm.max_iters = 5000
    res = run_trial(cfg, "nnm", 0.6, 0, {"lam": 1e-6})
    assert res.status == "failed" and "diverged" in res.error and math.isnan(res.rlne)


def test_checkpoints_written(tmp_path):
    cfg = ExperimentConfig(n=3, rank=1, depth=2, std=0.1, sampling_rates=[1.0],
                           methods=["dmf"], save_checkpoints=True)
    cfg.optimizer.max_iters = 200
    cfg.analysis.certify = False
    res = run_trial(cfg, "dmf", 1.0, 0, out_dir=tmp_path)
    assert (tmp_path / "checkpoints" / res.trial_id / "manifest.json").exists()
    assert (tmp_path / "problems" / f"{res.trial_id}.json").exists()


# --- sweeps ------------------------------------------------------------------------


def test_single_cell_sweep_wraps_trial():
    cfg = tiny_config(trials=1, methods=["omf"])
    res = sweep(cfg)
    assert len(res.trials) == 1 and res.aggregates[0].n_ok == 1
    assert res.aggregates[0].mean_rlne == res.trials[0].rlne and res.aggregates[0].std_rlne == 0.0


def test_sweep_aggregates_and_artifacts(tmp_path):
    cfg = tiny_config(trials=20, sampling_rates=[0.4, 0.6])
    res = sweep(cfg, tmp_path)
    for agg in res.aggregates:
        vals = [t.rlne for t in res.trials
                if t.method == agg.method and t.sampling_rate == agg.sampling_rate]
        assert len(vals) == 20
        assert agg.mean_rlne == float(np.mean(vals)) and agg.std_rlne == float(np.std(vals))
    for name in ("trials.csv", "sweep.json", "rlne_vs_rate.csv", "manifest.json", "timings.csv"):
        assert (tmp_path / name).exists()
    assert aggregate(read_trials_csv(tmp_path / "trials.csv")) == res.aggregates
    data = json.loads((tmp_path / "sweep.json").read_text())
    assert data["failed"] == 0 and set(data["tuned"]) == {"0.4", "0.6"}
    text = (tmp_path / "trials.csv").read_text()
    assert text.endswith("\n") and text.splitlines()[0].startswith("trial_id,method")


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = tiny_config(trials=3, methods=["dmf", "omf"])
    cfg.optimizer.max_iters = 300
    cfg.optimizer.record_every = 10
    sweep(cfg, tmp_path / "a", jobs=1)
    sweep(cfg, tmp_path / "b", jobs=2)
    assert (tmp_path / "a" / "trials.csv").read_bytes() == (tmp_path / "b" / "trials.csv").read_bytes()
    assert (tmp_path / "a" / "sweep.json").read_bytes() == (tmp_path / "b" / "sweep.json").read_bytes()


def test_sweep_counts_failures():
    cfg = tiny_config(trials=2, methods=["nnm"])
    cfg.nnm.step = 3.0
    cfg.nnm.tol = 1e-12
    cfg.nnm.max_iters = 5000
    cfg.nnm.lam_grid = [1e-6]
    res = sweep(cfg)
    assert res.failed == 2 and math.isnan(res.aggregates[0].mean_rlne)
