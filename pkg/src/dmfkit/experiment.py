"""Synthetic completion experiments: data generation, scoring, single trials
and Monte-Carlo sweeps with persisted artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .baselines import NnmConfig, OmfConfig, SolverError, nnm_solve, omf_solve, tune
from .dynamics import (
    MIN_SEGMENT,
    RATE_THRESHOLD,
    SMOOTH_WINDOW,
    CriticalityCert,
    SpeReport,
    Trajectory,
    TrajectoryRecorder,
    certify,
    detect_spe,
)
from .matrix import Mask, Mat, derive_seed, rng, singular_values
from .model import Problem, WeightStack, init_balanced, product, save_checkpoint, save_problem
from .optim import NonFiniteError, RmsPropState, StopRule, burnin, settle, train

log = logging.getLogger(__name__)

METHODS = ("dmf", "nnm", "omf")


# --- data -------------------------------------------------------------------


def gen_low_rank(n: int, rank: int, seed: int) -> Mat:
    """``A @ B.T`` with ``A, B`` of shape ``(n, rank)`` and standard normal entries."""
    if not 1 <= rank <= n:
        raise ValueError(f"need 1 <= rank <= n, got rank={rank}, n={n}")
    g = rng(seed)
    a = g.standard_normal((n, rank))
    b = g.standard_normal((n, rank))
    return a @ b.T


def power(m: Mat) -> float:
    """Average power ``||m||_F^2 / size``."""
    return float(np.vdot(m, m)) / m.size


def measured_snr(x: Mat, noise: Mat) -> float:
    return 10.0 * math.log10(power(x) / power(noise))


def add_noise_snr(x: Mat, snr_db: float, seed: int) -> Mat:
    """``x + N`` with Gaussian ``N`` rescaled so the SNR is exactly ``snr_db``.

    Values above 300 dB are clamped to 300 dB.
    """
    x = np.asarray(x, dtype=np.float64)
    px = power(x)
    if px == 0:
        raise ValueError("cannot set an SNR relative to a zero signal")
    snr_db = min(float(snr_db), 300.0)
    noise = rng(seed).standard_normal(x.shape)
    noise *= math.sqrt(px / 10.0 ** (snr_db / 10.0) / power(noise))
    return x + noise


def gen_mask(n: int, rate: float, seed: int, cols: Optional[int] = None) -> Mask:
    """Exactly ``round(rate * n * cols)`` observed entries, uniformly placed."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    cols = n if cols is None else cols
    size = n * cols
    count = int(round(rate * size))
    obs = np.zeros(size, dtype=bool)
    obs[rng(seed).choice(size, size=count, replace=False)] = True
    return Mask(obs.reshape(n, cols))


def rlne(x: Mat, y: Mat) -> float:
    """``||y - x||_F / ||x||_F`` against the noise-free reference ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    nx = float(np.linalg.norm(x))
    if nx == 0:
        raise ValueError("reference matrix is zero")
    return float(np.linalg.norm(y - x)) / nx


# --- configuration -----------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    algorithm: str = "rmsprop"
    eta: float = 1e-3
    r: Optional[float] = None  # defaults to 10 * eta
    alpha: float = 0.99
    epsilon: float = 1e-8
    t_spe: int = 500
    t_burnin: int = 100
    max_iters: int = 200_000
    record_every: int = 500
    loss_floor: float = 1e-10

    def state(self) -> RmsPropState:
        return RmsPropState(
            eta=self.eta,
            alpha=self.alpha,
            epsilon=self.epsilon,
            r=self.r if self.r is not None else 10 * self.eta,
            t_spe=self.t_spe,
            t_burnin=self.t_burnin,
        )


@dataclass
class NnmSettings:
    lam_grid: list[float] = field(default_factory=lambda: [float(x) for x in np.logspace(-4, 0, 9)])
    step: float = 1.0
    max_iters: int = 2000
    tol: float = 1e-6


@dataclass
class OmfSettings:
    rank: Optional[int] = None  # defaults to the true rank
    ridge_grid: list[float] = field(default_factory=lambda: [0.0, 1e-6, 1e-3])
    max_iters: int = 500
    tol: float = 1e-10


@dataclass
class AnalysisConfig:
    rate_threshold: float = RATE_THRESHOLD
    window: int = SMOOTH_WINDOW
    min_segment: int = MIN_SEGMENT
    sv_k: int = 10
    certify: bool = True
    tau_g: float = 1e-3
    tau_h: float = 1e-2
    lanczos_iters: int = 300
    lanczos_tol: float = 1e-6
    settle: bool = False  # also certify after a decaying-step settling phase
    settle_rounds: int = 12
    settle_steps: int = 2000


@dataclass
class ExperimentConfig:
    n: int = 100
    rank: int = 6
    depth: int = 6
    std: float = 1e-3
    snr_db: Optional[float] = None
    sampling_rates: list[float] = field(default_factory=lambda: [0.3])
    trials: int = 20
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seed: int = 0
    tune_seeds: int = 5
    output_dir: str = "results"
    save_checkpoints: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    nnm: NnmSettings = field(default_factory=NnmSettings)
    omf: OmfSettings = field(default_factory=OmfSettings)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    # top-level keys present in the source file, for override diagnostics
    given: frozenset = field(default=frozenset(), repr=False, compare=False)

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.n < 1:
            bad("n", "must be >= 1")
        if not 1 <= self.rank <= self.n:
            bad("rank", f"must satisfy 1 <= rank <= n ({self.n})")
        if self.depth < 1:
            bad("depth", "must be >= 1")
        if self.std <= 0:
            bad("std", "must be positive")
        if not self.sampling_rates:
            bad("sampling_rates", "must be non-empty")
        for r in self.sampling_rates:
            if not 0.0 < r <= 1.0:
                bad("sampling_rates", f"{r} is outside (0, 1]")
        if self.trials < 1:
            bad("trials", "must be >= 1")
        if not self.methods:
            bad("methods", "must be non-empty")
        for m in self.methods:
            if m not in METHODS:
                bad("methods", f"unknown method {m!r} (choose from {', '.join(METHODS)})")
        if self.tune_seeds < 1:
            bad("tune_seeds", "must be >= 1")
        opt = self.optimizer
        if opt.algorithm not in ("rmsprop", "spe_rmsprop"):
            bad("algorithm", f"unknown algorithm {opt.algorithm!r}")
        if opt.max_iters < 1 or opt.record_every < 1:
            bad("max_iters", "max_iters and record_every must be >= 1")
        try:
            opt.state()
        except ValueError as exc:
            bad("optimizer", str(exc))
        if self.omf.rank is not None and not 1 <= self.omf.rank <= self.n:
            bad("omf", "rank must lie in [1, n]")
        if not self.nnm.lam_grid or not self.omf.ridge_grid:
            bad("nnm", "tuning grids must be non-empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("given")
        return d


_SECTIONS = {
    "optimizer": OptimizerConfig,
    "nnm": NnmSettings,
    "omf": OmfSettings,
    "analysis": AnalysisConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from a plain mapping, rejecting unknown keys."""
    data = dict(data)
    baselines = data.pop("baselines", None)
    if baselines is not None:
        for key in ("nnm", "omf"):
            if key in baselines:
                data[key] = baselines[key]
    top_record = data.pop("record_every", None)
    kwargs: dict[str, Any] = {}
    top_fields = {f.name for f in fields(ExperimentConfig)}
    for key, value in data.items():
        if key not in top_fields or key == "given":
            raise ConfigError(f"{key}: unknown key")
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            known = {f.name for f in fields(cls)}
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table/object")
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"{sub}: unknown key in [{key}]")
            kwargs[key] = cls(**value)
        else:
            kwargs[key] = value
    given = set(data) | ({"record_every"} if top_record is not None else set())
    cfg = ExperimentConfig(**kwargs, given=frozenset(given))
    if top_record is not None:
        cfg.optimizer.record_every = int(top_record)
    if isinstance(cfg.sampling_rates, (int, float)):
        cfg.sampling_rates = [float(cfg.sampling_rates)]
    cfg.validate()
    return cfg


def _line_of(text: str, key: str) -> Optional[int]:
    pat = re.compile(rf'(^|[\s{{,"])"?{re.escape(key)}"?\s*[:=]')
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return lineno
    return None


def load_config(path) -> ExperimentConfig:
    """Read a JSON or TOML experiment config.

    Errors are :class:`ConfigError` messages of the form ``path:line: problem``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    if path.suffix.lower() == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be an object")
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        line = _line_of(text, key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --- trials ------------------------------------------------------------------


def rate_key(rate: float) -> str:
    return f"{rate:.6g}"


def trial_id(method: str, rate: float, trial: int) -> str:
    return f"{method}_r{rate:.3f}_t{trial:03d}"


def trial_seed(base: int, method: str, rate: float, trial: int) -> int:
    return derive_seed(base, method, rate_key(rate), trial)


def make_problem(cfg: ExperimentConfig, rate: float, trial: int, namespace: str = "eval") -> Problem:
    """Ground truth, noise and mask for one trial; shared by every method."""
    parts = (cfg.seed, namespace, rate_key(rate), trial)
    x = gen_low_rank(cfg.n, cfg.rank, derive_seed(*parts, "truth"))
    s = x if cfg.snr_db is None else add_noise_snr(x, cfg.snr_db, derive_seed(*parts, "noise"))
    mask = gen_mask(cfg.n, rate, derive_seed(*parts, "mask"))
    return Problem.from_matrix(s, mask, ground_truth=x)


@dataclass
class TrialResult:
    trial_id: str
    method: str
    sampling_rate: float
    trial: int
    seed: int
    status: str = "ok"
    rlne: float = float("nan")
    iters: int = 0
    sv_final: list[float] = field(default_factory=list)
    params: str = ""
    stage_count: Optional[int] = None
    lr_plateau: Optional[float] = None
    lr_decline: Optional[float] = None
    certified: Optional[bool] = None
    grad_norm: Optional[float] = None
    lambda_min: Optional[float] = None
    settled_certified: Optional[bool] = None
    settled_grad_norm: Optional[float] = None
    settled_lambda_min: Optional[float] = None
    stop_reason: str = ""
    error: str = ""
    wall_time: float = 0.0
    cert_time: float = 0.0  # seconds spent settling and certifying
    spe: Optional[SpeReport] = field(default=None, repr=False)
    cert: Optional[CriticalityCert] = field(default=None, repr=False)
    settled_cert: Optional[CriticalityCert] = field(default=None, repr=False)
    trajectory: Optional[Trajectory] = field(default=None, repr=False)
    stack: Optional[WeightStack] = field(default=None, repr=False)
    settled_stack: Optional[WeightStack] = field(default=None, repr=False)
    problem: Optional[Problem] = field(default=None, repr=False)


def _run_dmf(cfg: ExperimentConfig, prob: Problem, seed: int, res: TrialResult) -> Mat:
    opt = cfg.optimizer
    stack = init_balanced([cfg.n] * (cfg.depth + 1), cfg.std, seed)
    state = opt.state()
    if opt.algorithm == "spe_rmsprop":
        state = burnin(state, stack, prob)
    rec = TrajectoryRecorder(prob, cfg.analysis.sv_k)
    out = train(
        stack, prob, state, opt.max_iters,
        StopRule(loss_floor=opt.loss_floor), rec, opt.record_every, opt.algorithm,
    )
    res.iters = out.iterations
    res.stop_reason = out.reason
    res.trajectory = rec.trajectory
    res.stack = out.stack
    an = cfg.analysis
    try:
        spe = detect_spe(rec.trajectory, an.rate_threshold, an.min_segment, an.window)
    except ValueError as exc:
        log.warning("%s: no SPE analysis: %s", res.trial_id, exc)
    else:
        res.spe = spe
        res.stage_count = spe.stage_count
        lrs = rec.trajectory.eff_lrs
        # the EMA starts at zero, so the first ~1/(1-alpha) steps have inflated LRs
        warm = rec.trajectory.iters >= 1.0 / (1.0 - cfg.optimizer.alpha)
        res.lr_plateau = spe.mean_over(lrs, "plateau", warm)
        res.lr_decline = spe.mean_over(lrs, "decline", warm)
    if an.certify:
        t0 = time.perf_counter()
        cert = certify(out.stack, prob, an.tau_g, an.tau_h, an.lanczos_tol, an.lanczos_iters, seed)
        res.cert = cert
        res.certified = cert.is_second_order
        res.grad_norm = cert.grad_norm
        res.lambda_min = cert.lambda_min_estimate
        if an.settle:
            settled, _, _ = settle(
                out.stack, prob, out.state, an.tau_g / 2, rounds=an.settle_rounds,
                steps=an.settle_steps,
            )
            sc = certify(settled, prob, an.tau_g, an.tau_h, an.lanczos_tol, an.lanczos_iters, seed)
            res.settled_stack = settled
            res.settled_cert = sc
            res.settled_certified = sc.is_second_order
            res.settled_grad_norm = sc.grad_norm
            res.settled_lambda_min = sc.lambda_min_estimate
        res.cert_time = time.perf_counter() - t0
    return product(out.stack)


def run_trial(
    cfg: ExperimentConfig,
    method: str,
    rate: float,
    trial: int,
    params: Optional[dict] = None,
    out_dir=None,
) -> TrialResult:
    """One cell of a sweep.

    ``params`` carries tuned hyperparameters (``lam`` for NNM, ``ridge`` for
    OMF). Solver failures are recorded in the result, not raised. When
    ``out_dir`` is given the per-trial artifacts are written there.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    params = dict(params or {})
    seed = trial_seed(cfg.seed, method, rate, trial)
    res = TrialResult(trial_id(method, rate, trial), method, float(rate), trial, seed)
    res.params = ";".join(f"{k}={v!r}" for k, v in sorted(params.items()))
    start = time.perf_counter()
    prob = make_problem(cfg, rate, trial)
    res.problem = prob
    try:
        if method == "dmf":
            y = _run_dmf(cfg, prob, seed, res)
        elif method == "nnm":
            ncfg = NnmConfig(
                lam=params.get("lam", cfg.nnm.lam_grid[0]), step=cfg.nnm.step,
                max_iters=cfg.nnm.max_iters, tol=cfg.nnm.tol,
            )
            hist: list = []
            y = nnm_solve(prob, ncfg, hist)
            res.iters = len(hist)
        else:
            ocfg = OmfConfig(
                rank=cfg.omf.rank or cfg.rank, max_iters=cfg.omf.max_iters, tol=cfg.omf.tol,
                ridge=params.get("ridge", cfg.omf.ridge_grid[0]), seed=seed,
            )
            hist = []
            y = omf_solve(prob, ocfg, hist)
            res.iters = len(hist) // 2
        res.rlne = rlne(prob.ground_truth, y)
        res.sv_final = [float(s) for s in singular_values(y)[: cfg.analysis.sv_k]]
    except (SolverError, NonFiniteError, np.linalg.LinAlgError, FloatingPointError) as exc:
        res.status = "failed"
        res.error = f"{type(exc).__name__}: {exc}"
        log.warning("%s failed: %s", res.trial_id, res.error)
    res.wall_time = time.perf_counter() - start
    if out_dir is not None:
        write_trial_artifacts(res, out_dir, cfg.save_checkpoints)
    return res


# --- persistence -------------------------------------------------------------

CSV_COLUMNS = [
    "trial_id", "method", "sampling_rate", "trial", "seed", "status", "rlne", "iters",
    "stage_count", "lr_plateau", "lr_decline", "certified", "grad_norm", "lambda_min",
    "settled_certified", "settled_grad_norm", "settled_lambda_min", "stop_reason",
    "params", "error", "sv_final",
]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def write_trials_csv(results: list[TrialResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])


def read_trials_csv(path) -> list[TrialResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            def num(key, conv=float):
                return conv(row[key]) if row[key] != "" else None

            def flag(key):
                return None if row[key] == "" else row[key] == "true"

            out.append(
                TrialResult(
                    trial_id=row["trial_id"], method=row["method"],
                    sampling_rate=float(row["sampling_rate"]), trial=int(row["trial"]),
                    seed=int(row["seed"]), status=row["status"], rlne=float(row["rlne"]),
                    iters=int(row["iters"]), stage_count=num("stage_count", int),
                    lr_plateau=num("lr_plateau"), lr_decline=num("lr_decline"),
                    certified=flag("certified"), grad_norm=num("grad_norm"),
                    lambda_min=num("lambda_min"), settled_certified=flag("settled_certified"),
                    settled_grad_norm=num("settled_grad_norm"),
                    settled_lambda_min=num("settled_lambda_min"),
                    stop_reason=row["stop_reason"], params=row["params"], error=row["error"],
                    sv_final=[float(x) for x in row["sv_final"].split()],
                )
            )
    return out


def write_trial_artifacts(res: TrialResult, out_dir, save_checkpoints: bool = False) -> None:
    out = Path(out_dir)
    if res.trajectory is not None and len(res.trajectory):
        (out / "trajectories").mkdir(parents=True, exist_ok=True)
        res.trajectory.to_csv(out / "trajectories" / f"{res.trial_id}.csv")
    if res.spe is not None:
        (out / "spe").mkdir(parents=True, exist_ok=True)
        (out / "spe" / f"{res.trial_id}.json").write_text(res.spe.to_json() + "\n")
    if res.cert is not None:
        (out / "cert").mkdir(parents=True, exist_ok=True)
        payload = {"final": json.loads(res.cert.to_json())}
        if res.settled_cert is not None:
            payload["settled"] = json.loads(res.settled_cert.to_json())
        (out / "cert" / f"{res.trial_id}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
    if save_checkpoints and res.stack is not None:
        save_checkpoint(res.stack, out / "checkpoints" / res.trial_id, res.iters)
        (out / "problems").mkdir(parents=True, exist_ok=True)
        save_problem(res.problem, out / "problems" / f"{res.trial_id}.json")


# --- sweeps ------------------------------------------------------------------


@dataclass
class Aggregate:
    method: str
    sampling_rate: float
    mean_rlne: float
    std_rlne: float
    n_ok: int
    n_failed: int


@dataclass
class SweepResult:
    aggregates: list[Aggregate]
    trials: list[TrialResult]
    tuned: dict = field(default_factory=dict)

    @property
    def failed(self) -> int:
        return sum(a.n_failed for a in self.aggregates)

    def get(self, method: str, rate: float) -> Aggregate:
        for a in self.aggregates:
            if a.method == method and rate_key(a.sampling_rate) == rate_key(rate):
                return a
        raise KeyError((method, rate))

    def to_dict(self) -> dict:
        return {
            "aggregates": [asdict(a) for a in self.aggregates],
            "failed": self.failed,
            "tuned": self.tuned,
        }


def aggregate(trials: list[TrialResult]) -> list[Aggregate]:
    """Mean and population std of RLNE per (method, rate), over successful trials."""
    cells: dict[tuple[str, str], list[TrialResult]] = {}
    for t in trials:
        cells.setdefault((t.method, rate_key(t.sampling_rate)), []).append(t)
    out = []
    for (method, _), group in sorted(cells.items(), key=lambda kv: (kv[0][0], float(kv[0][1]))):
        ok = [t.rlne for t in group if t.status == "ok"]
        out.append(
            Aggregate(
                method, group[0].sampling_rate,
                float(np.mean(ok)) if ok else float("nan"),
                float(np.std(ok)) if ok else float("nan"),
                len(ok), len(group) - len(ok),
            )
        )
    return out


def tune_baselines(cfg: ExperimentConfig, rate: float, methods=None) -> dict:
    """Grid-search NNM weight and OMF ridge on tuning problems disjoint from evaluation.

    ``methods`` defaults to the baselines listed in the config.
    """
    methods = cfg.methods if methods is None else methods
    probs = [make_problem(cfg, rate, i, namespace="tune") for i in range(cfg.tune_seeds)]
    tuned: dict[str, dict] = {}
    if "nnm" in methods:
        grid = [
            NnmConfig(lam=lam, step=cfg.nnm.step, max_iters=cfg.nnm.max_iters, tol=cfg.nnm.tol)
            for lam in cfg.nnm.lam_grid
        ]
        res = tune(nnm_solve, probs, grid)
        tuned["nnm"] = {"lam": res.best.lam, "scores": res.scores}
    if "omf" in methods:
        rank = cfg.omf.rank or cfg.rank
        grid = [
            OmfConfig(rank=rank, max_iters=cfg.omf.max_iters, tol=cfg.omf.tol, ridge=ridge,
                      seed=derive_seed(cfg.seed, "tune-omf", i))
            for i, ridge in enumerate(cfg.omf.ridge_grid)
        ]
        res = tune(omf_solve, probs, grid)
        tuned["omf"] = {"ridge": res.best.ridge, "scores": res.scores}
    return tuned


def _cell_worker(args):
    cfg, method, rate, trial, params = args
    res = run_trial(cfg, method, rate, trial, params)
    # large arrays stay in the worker unless checkpoints are wanted
    if not cfg.save_checkpoints:
        res.stack = res.settled_stack = res.problem = None
    return res


def sweep(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, progress=None) -> SweepResult:
    """Run every (method, rate, trial) cell, aggregate, and write artifacts.

    Results are ordered by (method, rate, trial) regardless of ``jobs``.
    """
    cfg.validate()
    tuned = {rate_key(r): tune_baselines(cfg, r) for r in cfg.sampling_rates}
    cells = []
    for method in cfg.methods:
        for rate in cfg.sampling_rates:
            t = tuned[rate_key(rate)]
            params = {"lam": t["nnm"]["lam"]} if method == "nnm" else (
                {"ridge": t["omf"]["ridge"]} if method == "omf" else {})
            for trial in range(cfg.trials):
                cells.append((cfg, method, rate, trial, params))
    results: list[TrialResult] = []
    if jobs <= 1:
        for i, c in enumerate(cells):
            results.append(_cell_worker(c))
            if progress:
                progress(i + 1, len(cells), results[-1])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, r in enumerate(pool.map(_cell_worker, cells)):
                results.append(r)
                if progress:
                    progress(i + 1, len(cells), r)
    order = {m: i for i, m in enumerate(METHODS)}
    results.sort(key=lambda r: (order[r.method], r.sampling_rate, r.trial))
    result = SweepResult(aggregate(results), results, tuned)
    if out_dir is not None:
        write_sweep(cfg, result, out_dir)
    return result


def write_sweep(cfg: ExperimentConfig, result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in result.trials:
        write_trial_artifacts(r, out, cfg.save_checkpoints)
    write_trials_csv(result.trials, out / "trials.csv")
    (out / "sweep.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "rlne_vs_rate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "sampling_rate", "mean_rlne", "std_rlne", "n_ok", "n_failed"])
        for a in result.aggregates:
            w.writerow([a.method, repr(a.sampling_rate), repr(a.mean_rlne), repr(a.std_rlne),
                        a.n_ok, a.n_failed])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "wall_time_s"])
        for r in result.trials:
            w.writerow([r.trial_id, f"{r.wall_time:.3f}"])
    write_manifest(cfg, out)


def write_manifest(cfg: ExperimentConfig, out_dir) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "tool": "dmfkit",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
