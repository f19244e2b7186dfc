"""Command-line front end.

Exit codes: 0 success, 2 bad config or input, 3 solver failure,
4 criticality certificate negative. Machine-readable output goes to stdout,
logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .dynamics import MIN_SEGMENT, RATE_THRESHOLD, SMOOTH_WINDOW, Trajectory, certify, detect_spe
from .experiment import (
    ConfigError,
    ExperimentConfig,
    load_config,
    run_trial,
    sweep,
    tune_baselines,
    write_manifest,
    write_trials_csv,
)
from .model import load_checkpoint, load_problem

log = logging.getLogger("dmfkit")

OUT_ENV = "DMFKIT_OUT"
EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_UNCERTIFIED = 0, 2, 3, 4


class InputError(Exception):
    pass


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.output_dir if cfg else "results")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if getattr(args, "max_iters", None) is not None:
        cfg.optimizer.max_iters = args.max_iters
    cfg.validate()
    return cfg


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_run(args) -> int:
    cfg = _load(args)
    method = args.method or cfg.methods[0]
    if method not in ("dmf", "nnm", "omf"):
        raise InputError(f"unknown method {method!r}")
    rate = cfg.sampling_rates[0] if args.rate is None else args.rate
    if not 0.0 < rate <= 1.0:
        raise InputError(f"--rate {rate} is outside (0, 1]")
    if method != "dmf" and "optimizer" in cfg.given:
        log.warning("optimizer block only applies to dmf; ignored for %s", method)
    params = {}
    if method in ("nnm", "omf") and not args.no_tune:
        params = {k: v for k, v in tune_baselines(cfg, rate, [method])[method].items() if k != "scores"}
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    res = run_trial(cfg, method, rate, args.trial, params, out_dir=out)
    write_trials_csv([res], out / "trials.csv")
    write_manifest(cfg, out)
    _emit(
        {
            "trial_id": res.trial_id,
            "method": method,
            "rate": rate,
            "seed": res.seed,
            "status": res.status,
            "rlne": res.rlne,
            "iters": res.iters,
            "stages": res.stage_count,
            "certified": res.certified,
        }
    )
    if res.status != "ok":
        log.error("%s: %s", res.trial_id, res.error)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)

    def progress(done, total, res):
        log.info("[%d/%d] %s %s rlne=%.4g", done, total, res.trial_id, res.status, res.rlne)

    result = sweep(cfg, out, jobs=args.jobs, progress=progress)
    _emit(
        {
            "out": str(out),
            "failed": result.failed,
            "aggregates": [asdict(a) for a in result.aggregates],
        }
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        traj = Trajectory.from_csv(args.trajectory)
    except OSError as exc:
        raise InputError(f"{args.trajectory}: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        report = detect_spe(traj, args.rate_threshold, args.min_segment, args.window)
    except ValueError as exc:
        raise InputError(f"{args.trajectory}: {exc}") from None
    print(report.to_json())
    return EXIT_OK


def cmd_certify(args) -> int:
    try:
        stack, _ = load_checkpoint(args.checkpoint)
        prob = load_problem(args.problem)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot load inputs: {exc}") from None
    if stack.shape != prob.shape:
        raise InputError(f"checkpoint produces {stack.shape}, problem is {prob.shape}")
    if args.tau_g <= 0 or args.tau_h <= 0:
        raise InputError("--tau-g and --tau-h must be positive")
    cert = certify(stack, prob, args.tau_g, args.tau_h, args.tol, args.max_iters, args.seed)
    print(cert.to_json())
    return EXIT_OK if cert.is_second_order else EXIT_UNCERTIFIED


def cmd_tune(args) -> int:
    cfg = _load(args)
    rates = [args.rate] if args.rate is not None else cfg.sampling_rates
    methods = [m for m in cfg.methods if m != "dmf"] or ["nnm", "omf"]
    _emit({repr(r): tune_baselines(cfg, r, methods) for r in rates})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmfkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp, out=True):
        sp.add_argument("--config", required=True, help="JSON or TOML experiment config")
        sp.add_argument("--seed", type=int, help="override the base seed")
        sp.add_argument("--max-iters", type=int, help="override the DMF iteration cap")
        if out:
            sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or config)")

    sp = sub.add_parser("run", help="run a single trial")
    config_flags(sp)
    sp.add_argument("--method", choices=["dmf", "nnm", "omf"])
    sp.add_argument("--rate", type=float, help="sampling rate (default: first in config)")
    sp.add_argument("--trial", type=int, default=0, help="trial index (default 0)")
    sp.add_argument("--no-tune", action="store_true", help="skip baseline tuning")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run every method, rate and trial")
    config_flags(sp)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.add_argument("--trials", type=int, help="override the trial count")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("analyze", help="segment a saved trajectory into SPE stages")
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--rate-threshold", type=float, default=RATE_THRESHOLD)
    sp.add_argument("--window", type=int, default=SMOOTH_WINDOW)
    sp.add_argument("--min-segment", type=int, default=MIN_SEGMENT)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("certify", help="second-order criticality check of a checkpoint")
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--problem", required=True, help="problem JSON file")
    sp.add_argument("--tau-g", type=float, default=1e-3)
    sp.add_argument("--tau-h", type=float, default=1e-2)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-iters", type=int, default=300)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("tune", help="grid-search the baseline hyperparameters")
    config_flags(sp, out=False)
    sp.add_argument("--rate", type=float)
    sp.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    if args.command == "sweep":
        level = min(level, logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())
