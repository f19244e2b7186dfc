"""Reference completion methods: nuclear-norm minimisation by proximal gradient
(NNM) and explicit rank-k factorisation by alternating least squares (OMF).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .matrix import Mat, SvdError, derive_seed, rng
from .model import Problem

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


def svt_shrink(m: Mat, threshold: float) -> Mat:
    """Singular value soft-thresholding, the proximal map of ``threshold * ||.||_*``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(str(exc)) from exc
    s = np.maximum(s - threshold, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


@dataclass
class NnmConfig:
    """``lam`` is the nuclear-norm weight.

    When ``relative`` is set, the weight actually used is
    ``lam * ||P(S)||_2`` so one grid fits every data scale.
    """

    lam: float = 1e-2
    step: float = 1.0
    max_iters: int = 2000
    tol: float = 1e-6
    relative: bool = True

    def __post_init__(self):
        if self.lam <= 0 or self.step <= 0 or self.max_iters < 1:
            raise ValueError("lam, step and max_iters must be positive")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")


def nuclear_objective(prob: Problem, x: Mat, lam: float) -> float:
    r = (x - prob.target) * prob._weights
    return 0.5 * float(np.vdot(r, r)) + lam * float(np.linalg.svd(x, compute_uv=False).sum())


def nnm_weight(prob: Problem, cfg: NnmConfig) -> float:
    if not cfg.relative:
        return cfg.lam
    return cfg.lam * float(np.linalg.norm(prob.target, 2))


def nnm_solve(prob: Problem, cfg: NnmConfig, history: Optional[list] = None) -> Mat:
    """Minimise ``1/2 ||P(X - S)||_F^2 + lam ||X||_*`` by proximal gradient from X = 0.

    Stops when ``||X_new - X||_F / ||X||_F < tol``. If ``history`` is given,
    the objective after every iteration is appended to it.
    """
    lam = nnm_weight(prob, cfg)
    x = np.zeros(prob.shape)
    scale = max(1.0, float(np.linalg.norm(prob.target)))
    for it in range(cfg.max_iters):
        grad = (x - prob.target) * prob._weights
        x_new = svt_shrink(x - cfg.step * grad, cfg.step * lam)
        change = float(np.linalg.norm(x_new - x))
        x = x_new
        if history is not None:
            history.append(nuclear_objective(prob, x, lam))
        norm = float(np.linalg.norm(x))
        if not math.isfinite(norm) or norm > 1e6 * scale:
            raise SolverError(f"NNM diverged at iteration {it} (||X||_F = {norm:.3e})")
        if change <= cfg.tol * max(norm, 1e-300):
            break
    return x


def nnm_fixed_point_residual(prob: Problem, x: Mat, cfg: NnmConfig) -> float:
    """``||X - prox(X - step * grad)||_F / ||X||_F``; zero exactly at a minimiser."""
    lam = nnm_weight(prob, cfg)
    y = svt_shrink(x - cfg.step * (x - prob.target) * prob._weights, cfg.step * lam)
    return float(np.linalg.norm(x - y) / max(np.linalg.norm(x), 1e-300))


@dataclass
class OmfConfig:
    rank: int = 6
    max_iters: int = 500
    tol: float = 1e-10
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1 or self.max_iters < 1 or self.tol <= 0 or self.ridge < 0:
            raise ValueError("invalid OMF configuration")


def omf_objective(prob: Problem, u: Mat, v: Mat, ridge: float) -> float:
    r = (u @ v.T - prob.target) * prob._weights
    return 0.5 * float(np.vdot(r, r)) + 0.5 * ridge * float(np.vdot(u, u) + np.vdot(v, v))


def _solve_rows(weights: Mat, target: Mat, other: Mat, ridge: float) -> Mat:
    """Row-wise ridge least squares: row i fits ``target[i]`` on its observed columns."""
    k = other.shape[1]
    grams = np.einsum("ij,jk,jl->ikl", weights, other, other) + ridge * np.eye(k)
    rhs = (weights * target) @ other
    try:
        return np.linalg.solve(grams, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        warnings.warn("singular normal equations in ALS; falling back to least squares")
        return np.stack(
            [np.linalg.lstsq(g, b, rcond=None)[0] for g, b in zip(grams, rhs)]
        )


def omf_solve(prob: Problem, cfg: OmfConfig, history: Optional[list] = None) -> Mat:
    """Alternating ridge least squares for ``U V^T`` of rank ``cfg.rank``.

    ``history`` (optional) receives the objective after each half-sweep.
    """
    rows, cols = prob.shape
    if cfg.rank > min(rows, cols):
        raise ValueError(f"rank {cfg.rank} exceeds matrix dimensions {prob.shape}")
    g = rng(derive_seed(cfg.seed, "omf-init"))
    u = g.standard_normal((rows, cfg.rank))
    v = g.standard_normal((cols, cfg.rank))
    w, s = prob._weights, prob.target
    prev = omf_objective(prob, u, v, cfg.ridge)
    for _ in range(cfg.max_iters):
        u = _solve_rows(w, s, v, cfg.ridge)
        if history is not None:
            history.append(omf_objective(prob, u, v, cfg.ridge))
        v = _solve_rows(w.T, s.T, u, cfg.ridge)
        obj = omf_objective(prob, u, v, cfg.ridge)
        if history is not None:
            history.append(obj)
        if not math.isfinite(obj):
            raise SolverError("OMF objective became non-finite")
        if prev - obj <= cfg.tol * max(prev, 1e-300):
            break
        prev = obj
    return u @ v.T


@dataclass
class TuneResult:
    best: object
    scores: list[float]


def tune(
    solve: Callable[[Problem, object], Mat],
    problems: Sequence[Problem],
    grid: Sequence[object],
) -> TuneResult:
    """Pick the grid point with the lowest mean RLNE over ``problems``.

    Every problem must carry its ``ground_truth``. Ties go to the earlier
    grid point; a failing configuration scores ``inf``.
    """
    from .experiment import rlne

    if not grid:
        raise ValueError("empty tuning grid")
    scores = []
    for cfg in grid:
        try:
            errs = [rlne(p.ground_truth, solve(p, cfg)) for p in problems]
            scores.append(float(np.mean(errs)))
        except (SolverError, SvdError, np.linalg.LinAlgError) as exc:
            log.warning("tuning: %r failed: %s", cfg, exc)
            scores.append(math.inf)
    best = int(np.argmin(scores))
    return TuneResult(grid[best], scores)
