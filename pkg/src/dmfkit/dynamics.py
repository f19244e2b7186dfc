"""Interpreting training runs.

* trajectory recording (loss, leading singular values, effective LR,
  balancedness, gradient norm),
* segmentation of the loss curve into plateau / rapid-decline runs and
  counting saddle-escape stages,
* Hessian-vector products of the weight-space loss and a Lanczos estimate of
  its smallest eigenvalue, combined into a second-order criticality check.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .matrix import derive_seed, rng, singular_values
from .model import Problem, WeightStack, balancedness, loss_and_gradients, product, residual
from .optim import RmsPropState

# Defaults for detect_spe. The rate is in decades of loss per recorded sample:
# 0.005 == half a decade per 100 samples.
RATE_THRESHOLD = 0.005
SMOOTH_WINDOW = 11
MIN_SEGMENT = 5


@dataclass
class Sample:
    iter: int
    loss: float
    sv_topk: list[float]
    eff_lr: float
    theta_balance: float
    grad_norm: float


@dataclass
class Trajectory:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def append(self, sample: Sample) -> None:
        if self.samples and sample.iter <= self.samples[-1].iter:
            raise ValueError(
                f"iterations must increase: {sample.iter} after {self.samples[-1].iter}"
            )
        self.samples.append(sample)

    @property
    def iters(self) -> np.ndarray:
        return np.array([s.iter for s in self.samples], dtype=np.int64)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.samples])

    @property
    def eff_lrs(self) -> np.ndarray:
        return np.array([s.eff_lr for s in self.samples])

    def to_csv(self, path) -> None:
        k = max((len(s.sv_topk) for s in self.samples), default=0)
        header = ["iter", "loss"] + [f"sv_{i}" for i in range(1, k + 1)]
        header += ["eff_lr", "theta", "grad_norm"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for s in self.samples:
                svs = list(s.sv_topk) + [0.0] * (k - len(s.sv_topk))
                w.writerow(
                    [s.iter, repr(s.loss), *map(repr, svs),
                     repr(s.eff_lr), repr(s.theta_balance), repr(s.grad_norm)]
                )

    @classmethod
    def from_csv(cls, path) -> Trajectory:
        """Parse a trajectory CSV; errors name the offending line."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty trajectory file")
        header = rows[0]
        if header[:2] != ["iter", "loss"] or header[-3:] != ["eff_lr", "theta", "grad_norm"]:
            raise ValueError(f"{path}:1: unexpected header {header}")
        k = len(header) - 5
        traj = cls()
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(x) for x in row]
                traj.append(
                    Sample(int(row[0]), vals[1], vals[2 : 2 + k], vals[2 + k], vals[3 + k], vals[4 + k])
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return traj


def record(
    traj: Trajectory,
    stack: WeightStack,
    prob: Problem,
    state: Optional[RmsPropState] = None,
    k: int = 10,
    iteration: Optional[int] = None,
) -> Trajectory:
    """Append a sample describing ``stack``; the iteration defaults to ``state.t``."""
    loss, grads = loss_and_gradients(stack, prob)
    svs = singular_values(product(stack))[:k]
    it = iteration if iteration is not None else (state.t if state is not None else len(traj))
    traj.append(
        Sample(
            iter=int(it),
            loss=loss,
            sv_topk=[float(x) for x in svs],
            eff_lr=state.eff_lr if state is not None else 0.0,
            theta_balance=balancedness(stack),
            grad_norm=math.sqrt(sum(float(np.vdot(g, g)) for g in grads)),
        )
    )
    return traj


class TrajectoryRecorder:
    """Callback for :func:`dmfkit.optim.train` that fills a :class:`Trajectory`."""

    def __init__(self, prob: Problem, k: int = 10):
        self.prob = prob
        self.k = k
        self.trajectory = Trajectory()

    def __call__(self, iteration: int, stack: WeightStack, state: RmsPropState) -> None:
        record(self.trajectory, stack, self.prob, state, self.k, iteration)


# --- saddle-escape segmentation ---------------------------------------------


@dataclass
class Segment:
    kind: str  # "plateau" or "decline"
    start_index: int
    end_index: int  # inclusive
    start_iter: int
    end_iter: int
    mean_loss_rate: float  # decades per recorded sample

    @property
    def length(self) -> int:
        return self.end_index - self.start_index + 1


@dataclass
class Stage:
    plateau_span: Optional[tuple[int, int]]
    decline_span: tuple[int, int]


@dataclass
class SpeReport:
    segments: list[Segment]
    stage_count: int
    stages: list[Stage]
    rate_threshold: float
    window: int
    min_segment: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def mean_over(self, values: np.ndarray, kind: str, keep: np.ndarray | None = None) -> float:
        """Mean of a per-sample series over all segments of ``kind``.

        ``keep`` optionally masks out samples. NaN if nothing is left.
        """
        values = np.asarray(values, dtype=np.float64)
        keep = np.ones(len(values), dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
        picked = [
            values[s.start_index : s.end_index + 1][keep[s.start_index : s.end_index + 1]]
            for s in self.segments
            if s.kind == kind
        ]
        picked = np.concatenate(picked) if picked else np.empty(0)
        return float(np.mean(picked)) if picked.size else float("nan")


def smoothed_log_rate(losses: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centered moving average of ``d log10(loss) / d index``.

    The window shrinks symmetrically near the ends.
    """
    y = np.log10(np.maximum(np.asarray(losses, dtype=np.float64), 1e-300))
    d = np.gradient(y) if len(y) > 1 else np.zeros_like(y)
    half = max(window, 1) // 2
    c = np.concatenate([[0.0], np.cumsum(d)])
    out = np.empty_like(d)
    n = len(d)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = (c[i + h + 1] - c[i - h]) / (2 * h + 1)
    return out


def _runs(labels: np.ndarray) -> list[list[int]]:
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append([int(labels[start]), start, i - 1])
            start = i
    return runs


def detect_spe(
    traj: Trajectory | np.ndarray,
    rate_threshold: float = RATE_THRESHOLD,
    min_segment: int = MIN_SEGMENT,
    window: int = SMOOTH_WINDOW,
    iters: Optional[np.ndarray] = None,
) -> SpeReport:
    """Split a loss curve into plateau and rapid-decline runs.

    A sample is in decline when the smoothed log10-loss rate is below
    ``-rate_threshold``. Runs shorter than ``min_segment`` are absorbed into
    their neighbours, shortest first. Every decline run is one stage; a
    decline at the very start counts even though no plateau precedes it.

    ``traj`` may also be a bare array of losses.
    """
    if isinstance(traj, Trajectory):
        losses, iters = traj.losses, traj.iters
    else:
        losses = np.asarray(traj, dtype=np.float64)
        iters = np.arange(len(losses)) if iters is None else np.asarray(iters)
    if len(losses) < 2 * min_segment or len(losses) < 2:
        raise ValueError(
            f"trajectory too short: {len(losses)} samples, need {max(2 * min_segment, 2)}"
        )
    rate = smoothed_log_rate(losses, window)
    labels = (rate < -rate_threshold).astype(int)

    while True:
        runs = _runs(labels)
        if len(runs) == 1:
            break
        short = [r for r in runs if r[2] - r[1] + 1 < min_segment]
        if not short:
            break
        kind, a, b = min(short, key=lambda r: (r[2] - r[1], r[1]))
        labels[a : b + 1] = 1 - kind

    segments = [
        Segment(
            "decline" if kind else "plateau",
            a, b, int(iters[a]), int(iters[b]),
            float(rate[a : b + 1].mean()),
        )
        for kind, a, b in _runs(labels)
    ]
    stages = []
    for i, seg in enumerate(segments):
        if seg.kind != "decline":
            continue
        prev = segments[i - 1] if i else None
        stages.append(
            Stage(
                (prev.start_iter, prev.end_iter) if prev else None,
                (seg.start_iter, seg.end_iter),
            )
        )
    return SpeReport(segments, len(stages), stages, rate_threshold, window, min_segment)


# --- curvature --------------------------------------------------------------


def flat_gradient(stack: WeightStack, prob: Problem) -> np.ndarray:
    _, grads = loss_and_gradients(stack, prob)
    return np.concatenate([g.ravel() for g in grads])


def hvp(
    stack: WeightStack,
    prob: Problem,
    v: np.ndarray,
    step: float = 1e-5,
    scale: bool = True,
) -> np.ndarray:
    """Hessian-vector product of the weight-space loss by central differences.

    The perturbation is ``h = step * max(1, ||theta||) / ||v||`` when ``scale``
    is set, otherwise ``h = step``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (stack.num_params,):
        raise ValueError(f"v must have length {stack.num_params}")
    if step <= 0:
        raise ValueError("step must be positive")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(v)
    theta = stack.flat()
    h = step * max(1.0, float(np.linalg.norm(theta))) / vnorm if scale else step
    plus = flat_gradient(stack.with_flat(theta + h * v), prob)
    minus = flat_gradient(stack.with_flat(theta - h * v), prob)
    out = (plus - minus) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return out


class EigenEstimate(NamedTuple):
    value: float
    iterations: int
    converged: bool


def lanczos_min(
    matvec, n: int, tol: float = 1e-6, max_iters: int = 200, seed: int = 0, min_iters: int = 20
) -> EigenEstimate:
    """Smallest eigenvalue of a symmetric operator by Lanczos with full
    reorthogonalisation.

    Stops once at least ``min_iters`` steps are done and the residual bound
    ``|beta_k * y_k|`` of the smallest Ritz pair is below
    ``tol * max(1, |theta|)``, or when the Krylov space becomes invariant.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = min(max_iters, n)
    # salted so the start vector never coincides with a stream used for weights
    q = rng(derive_seed("lanczos", seed)).standard_normal(n)
    Q = np.zeros((n, m))
    Q[:, 0] = q / np.linalg.norm(q)
    alphas: list[float] = []
    betas: list[float] = []
    est, converged, k = float("nan"), False, 0
    for k in range(1, m + 1):
        w = np.asarray(matvec(Q[:, k - 1]), dtype=np.float64)
        alphas.append(float(Q[:, k - 1] @ w))
        for _ in range(2):
            w -= Q[:, :k] @ (Q[:, :k].T @ w)
        b = float(np.linalg.norm(w))
        T = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
        evals, evecs = np.linalg.eigh(T)
        est = float(evals[0])
        scale = max(1.0, float(np.max(np.abs(evals))))
        if k == n or b <= 1e-10 * scale:
            converged = True
            break
        if k >= min(min_iters, n) and abs(b * evecs[-1, 0]) <= tol * max(1.0, abs(est)):
            converged = True
            break
        if k < m:
            betas.append(b)
            Q[:, k] = w / b
    return EigenEstimate(est, k, converged)


def min_eigenvalue(
    stack: WeightStack,
    prob: Problem,
    tol: float = 1e-6,
    max_iters: int = 300,
    seed: int = 0,
    step: float = 1e-5,
) -> EigenEstimate:
    """Estimate the smallest Hessian eigenvalue of the weight-space loss."""
    n = stack.num_params
    return lanczos_min(lambda v: hvp(stack, prob, v, step), n, tol, max_iters, seed)


@dataclass
class CriticalityCert:
    tau_g: float
    tau_h: float
    grad_norm: float
    lambda_min_estimate: float
    lanczos_iters: int
    lanczos_converged: bool
    residual_norm: float
    is_second_order: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def certify(
    stack: WeightStack,
    prob: Problem,
    tau_g: float,
    tau_h: float,
    tol: float = 1e-6,
    max_iters: int = 300,
    seed: int = 0,
) -> CriticalityCert:
    """Check ``||grad|| <= tau_g`` and ``lambda_min(Hessian) >= -tau_h`` in weight space.

    ``residual_norm`` is the gradient norm with respect to the end-to-end
    matrix, reported for reference only.
    """
    if tau_g <= 0 or tau_h <= 0:
        raise ValueError("tolerances must be positive")
    gnorm = float(np.linalg.norm(flat_gradient(stack, prob)))
    est = min_eigenvalue(stack, prob, tol, max_iters, seed)
    return CriticalityCert(
        tau_g=tau_g,
        tau_h=tau_h,
        grad_norm=gnorm,
        lambda_min_estimate=est.value,
        lanczos_iters=est.iterations,
        lanczos_converged=est.converged,
        residual_norm=float(np.linalg.norm(residual(stack, prob))),
        is_second_order=bool(gnorm <= tau_g and est.value >= -tau_h),
    )
