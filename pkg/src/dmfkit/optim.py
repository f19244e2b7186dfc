"""Full-batch RMSProp with a scalar adaptive coefficient, and its periodic
large-step variant.

The accumulator is a single scalar: the EMA of the summed squared Frobenius
norms of all layer gradients. The step applied to every layer is
``lr * A(t) * G_l`` with ``A(t) = 1 / (sqrt(v_hat) + eps)``; all layers are
updated from gradients taken at the same (old) stack.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional

import numpy as np

from .model import Problem, WeightStack, loss_and_gradients

log = logging.getLogger(__name__)

Algorithm = Literal["rmsprop", "spe_rmsprop"]


class NonFiniteError(FloatingPointError):
    """A gradient or weight became NaN/Inf; the trial cannot continue."""


class RecorderError(RuntimeError):
    pass


@dataclass
class RmsPropState:
    eta: float = 1e-3
    alpha: float = 0.99
    epsilon: float = 1e-8
    r: float = 1e-2
    t_spe: int = 500
    t_burnin: int = 100
    v: float = 0.0
    t: int = 0
    eff_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.epsilon <= 0 or self.eta <= 0 or self.r <= 0:
            raise ValueError("epsilon, eta and r must be positive")
        if self.t_spe < 1 or self.t_burnin < 0 or self.t < 0 or self.v < 0:
            raise ValueError("t_spe >= 1, t_burnin >= 0, t >= 0, v >= 0 required")

    def coefficient(self, v: Optional[float] = None) -> float:
        """``A(t)`` for accumulator value ``v`` (defaults to the stored one)."""
        v = self.v if v is None else v
        v_hat = v / (1.0 - self.alpha ** (self.t + 1))
        return 1.0 / (math.sqrt(v_hat) + self.epsilon)


@dataclass
class StepInfo:
    loss: float  # loss at the stack the step started from
    grad_sq: float  # sum_l ||G_l||_F^2 at that stack
    eff_lr: float


def _step(state: RmsPropState, stack: WeightStack, prob: Problem, lr: float):
    loss, grads = loss_and_gradients(stack, prob)
    grad_sq = float(sum(np.vdot(g, g) for g in grads))
    if not math.isfinite(grad_sq):
        raise NonFiniteError(
            f"non-finite gradient at iteration {state.t} (loss={loss!r})"
        )
    v = state.alpha * state.v + (1.0 - state.alpha) * grad_sq
    a = state.coefficient(v)
    step = lr * a
    new = WeightStack([w - step * g for w, g in zip(stack.layers, grads)])
    return new, replace(state, v=v, t=state.t + 1, eff_lr=step), StepInfo(loss, grad_sq, step)


def rmsprop_step(state: RmsPropState, stack: WeightStack, prob: Problem):
    """One plain full-batch RMSProp step.

    Returns ``(new_stack, new_state, eff_lr)`` where ``eff_lr = eta * A(t)``.
    """
    new, state, info = _step(state, stack, prob, state.eta)
    return new, state, info.eff_lr


def spe_lr(state: RmsPropState) -> float:
    """Base step for iteration ``state.t``: ``r`` every ``t_spe`` iterations, else ``eta``."""
    return state.r if state.t % state.t_spe == 0 else state.eta


def spe_rmsprop_step(state: RmsPropState, stack: WeightStack, prob: Problem):
    """Like :func:`rmsprop_step`, but uses ``r`` whenever ``t mod t_spe == 0``."""
    new, state, info = _step(state, stack, prob, spe_lr(state))
    return new, state, info.eff_lr


def burnin(
    state: RmsPropState, stack: WeightStack, prob: Problem, t_burnin: Optional[int] = None
) -> RmsPropState:
    """Warm-start the accumulator with ``t_burnin`` plain RMSProp steps.

    The steps run on a scratch copy; only ``v`` survives, and ``t`` restarts
    at zero.
    """
    n = state.t_burnin if t_burnin is None else t_burnin
    if n < 0:
        raise ValueError("t_burnin must be non-negative")
    if n == 0:
        return state
    scratch, s = stack, state
    for _ in range(n):
        scratch, s, _ = _step(s, scratch, prob, s.eta)
    return replace(state, v=s.v, t=0, eff_lr=0.0)


@dataclass
class StopRule:
    """Training stops at the first rule that fires.

    ``loss_floor``: loss of the current iterate below this value.
    ``grad_tol``: gradient norm below this for ``patience`` consecutive
    recorded points (disabled when None).
    """

    loss_floor: float = 1e-10
    grad_tol: Optional[float] = None
    patience: int = 100


@dataclass
class DecreaseMonitor:
    """Counts large-residual iterations where the loss failed to decrease.

    An iteration counts as large-residual when ``||residual||_F >= tau``.
    """

    tau: float
    checked: int = 0
    violations: int = 0

    @property
    def fraction_ok(self) -> float:
        return 1.0 if self.checked == 0 else 1.0 - self.violations / self.checked


@dataclass
class TrainOutcome:
    stack: WeightStack
    state: RmsPropState
    reason: str
    iterations: int
    final_loss: float
    monitor: Optional[DecreaseMonitor] = None
    history: list = field(default_factory=list, repr=False)


Recorder = Callable[[int, WeightStack, RmsPropState], None]


def train(
    stack: WeightStack,
    prob: Problem,
    state: RmsPropState,
    max_iters: int,
    stop: Optional[StopRule] = None,
    recorder: Optional[Recorder] = None,
    record_every: int = 100,
    algorithm: Algorithm = "rmsprop",
    monitor: Optional[DecreaseMonitor] = None,
) -> TrainOutcome:
    """Run ``max_iters`` steps of the chosen algorithm or until ``stop`` fires.

    The recorder is called after the first step and after every
    ``record_every``-th step, and once more for the final iterate if that
    point was not already recorded.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if algorithm not in ("rmsprop", "spe_rmsprop"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    stop = stop or StopRule()
    spe = algorithm == "spe_rmsprop"
    reason = "max_iters"
    quiet_points = 0
    prev_loss = None
    last_recorded = 0
    k = 0
    info = None

    def _record(k):
        if recorder is None:
            return
        try:
            recorder(k, stack, state)
        except Exception as exc:
            raise RecorderError(f"recorder failed at iteration {k}: {exc}") from exc

    while k < max_iters:
        lr = spe_lr(state) if spe else state.eta
        stack, state, info = _step(state, stack, prob, lr)
        k += 1
        if monitor is not None and prev_loss is not None:
            if math.sqrt(2.0 * prev_loss) >= monitor.tau:
                monitor.checked += 1
                if info.loss > prev_loss:
                    monitor.violations += 1
        prev_loss = info.loss
        if info.loss < stop.loss_floor:
            reason = "floor"
            break
        if k == 1 or k % record_every == 0:
            _record(k)
            last_recorded = k
            if stop.grad_tol is not None:
                quiet_points = quiet_points + 1 if math.sqrt(info.grad_sq) < stop.grad_tol else 0
                if quiet_points > stop.patience:
                    reason = "grad"
                    break
    if not stack.is_finite():
        raise NonFiniteError(f"weights became non-finite by iteration {k}")
    if last_recorded != k:
        _record(k)
    final = loss_and_gradients(stack, prob)[0]
    log.debug("train stopped after %d iterations (%s), loss %.3e", k, reason, final)
    return TrainOutcome(stack, state, reason, k, final, monitor)


def settle(
    stack: WeightStack,
    prob: Problem,
    state: RmsPropState,
    grad_target: float,
    rounds: int = 12,
    steps: int = 2000,
    decay: float = 0.1,
) -> tuple[WeightStack, RmsPropState, float]:
    """Drive the gradient norm below ``grad_target`` with shrinking steps.

    At a fixed base step the scalar-adaptive iteration can lock into a
    period-two oscillation around a critical point, with a gradient norm
    proportional to the step. Each round multiplies ``eta`` by ``decay`` and
    runs ``steps`` plain RMSProp steps, until the target is met or the
    rounds run out. Returns the final stack, state and gradient norm.
    """
    if not 0 < decay < 1 or rounds < 0 or steps < 1:
        raise ValueError("need 0 < decay < 1, rounds >= 0, steps >= 1")

    def gnorm(s):
        return math.sqrt(sum(float(np.vdot(g, g)) for g in loss_and_gradients(s, prob)[1]))

    g = gnorm(stack)
    for _ in range(rounds):
        if g <= grad_target:
            break
        state = replace(state, eta=state.eta * decay)
        for _ in range(steps):
            stack, state, _ = _step(state, stack, prob, state.eta)
        g = gnorm(stack)
        log.debug("settle: eta %.2e, grad norm %.3e", state.eta, g)
    return stack, state, g


@dataclass
class TheoryConstants:
    """Constants that set the step sizes in the convergence analysis.

    ``depth`` is the network depth ``L``. ``gamma`` is a coefficient: the
    effective value is ``gamma * tau ** gamma_exponent`` (0.5 by default,
    since the analysis requires gamma to shrink like ``sqrt(tau)``).
    """

    K: float = 1.0
    nu: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    Lambda: float = 1.0
    rho: float = 1.0
    B: float = 1.0
    M: float = 1.0
    depth: float = 1.0
    gamma_exponent: float = 0.5


@dataclass(frozen=True)
class ScheduleParams:
    tau: float
    gamma: float
    eta: float
    r: float
    omega: float
    ell_thresh: float
    t_thresh: float
    g_thresh: float

    def to_state(self, **kw) -> RmsPropState:
        """Optimizer state using these step sizes, with ``t_spe = ceil(t_thresh)``."""
        kw.setdefault("t_spe", max(1, math.ceil(self.t_thresh)))
        return RmsPropState(eta=self.eta, r=self.r, **kw)


def schedule_from_tau(c: TheoryConstants, tau: float) -> ScheduleParams:
    """Step sizes and escape thresholds as functions of the target accuracy ``tau``."""
    for name in ("K", "nu", "gamma", "delta", "Lambda", "rho", "B", "M", "depth"):
        if getattr(c, name) <= 0:
            raise ValueError(f"constant {name} must be positive")
    if tau <= 0:
        raise ValueError("tau must be positive")
    L, M = c.depth, c.M
    gamma = c.gamma * tau**c.gamma_exponent
    omega = tau**-0.5
    eta = (c.K**2 * c.nu**2 * gamma**6 * c.delta**2) / (
        64 * L**10 * c.Lambda**10 * M ** (10 * L - 10) * c.B**4 * c.rho**2 * tau**2 * omega**2
    )
    r = (c.K * c.nu * gamma**4 * c.delta) / (
        8 * L**5 * c.Lambda**5 * M ** (5 * L - 5) * c.B**2 * c.rho * tau
    )
    ell = (c.K**2 * c.nu**2 * gamma**6 * c.delta) / (
        2 * L**6 * c.Lambda**6 * M ** (4 * L - 2) * c.B**2 * c.rho**2 * tau
    )
    t_thresh = omega / (eta * gamma)
    return ScheduleParams(tau, gamma, eta, r, omega, ell, t_thresh, ell / t_thresh)
