"""ADMM-style alternating optimizer for keep ratios under a resource budget.

Keep ratios live in logit space (``A = sigmoid(theta)``). An auxiliary copy
``z`` carries the budget constraint, ``u2`` is the dual of ``theta == z``
and ``u1`` the dual of the hinged budget violation.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .graph import BudgetLike, eval_budget, eval_budget_grad

log = logging.getLogger(__name__)

INIT_KEEP = 1.0 - 1e-4
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass
class AllocState:
    theta: np.ndarray
    z: np.ndarray
    u1: float = 0.0
    u2: np.ndarray = field(default=None)
    rho1: float = 0.01
    rho2: float = 0.01
    eta_z: float = 1e-3
    inner_steps: int = 50
    lv_scale: float = 1e5
    lr_theta: float = 1e-2
    nonneg_projection: bool = True
    square_hinge: bool = True
    theta_clip: float | None = None
    iteration: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.u2 is None:
            self.u2 = np.zeros_like(self.theta)
        self.u2 = np.asarray(self.u2, dtype=float)

    @classmethod
    def initial(cls, K: int, keep: float = INIT_KEEP, **hyper) -> "AllocState":
        theta = np.full(K, float(logit(keep)))
        return cls(theta=theta, z=theta.copy(), **hyper)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("theta", "z", "u2"):
            d[k] = [float(x) for x in d[k]]
        return d

    @classmethod
    def from_dict(cls, d) -> "AllocState":
        return cls(**d)


def current_alpha(state: AllocState) -> np.ndarray:
    return expit(state.theta)


def land_on_budget(state: AllocState, prev_theta, model: BudgetLike, budget: float, iters: int = 60) -> np.ndarray:
    """Shorten the last theta move so ``F(sigmoid(theta))`` sits at the budget.

    Only applies when the move crossed from infeasible to feasible; the
    bisection runs along the segment from ``prev_theta`` to ``theta``.
    """
    prev_theta = np.asarray(prev_theta, dtype=float)
    if float(eval_budget(model, expit(prev_theta))) <= budget:
        return state.theta
    if float(eval_budget(model, expit(state.theta))) > budget:
        return state.theta
    lo, hi = 0.0, 1.0
    d = state.theta - prev_theta
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if float(eval_budget(model, expit(prev_theta + mid * d))) > budget:
            lo = mid
        else:
            hi = mid
    state.theta = prev_theta + hi * d
    return state.theta


def theta_step(state: AllocState, dLv_dA) -> np.ndarray:
    """One (projected) gradient step on the theta sub-problem."""
    dLv_dA = np.asarray(dLv_dA, dtype=float)
    A = expit(state.theta)
    g = state.lv_scale * dLv_dA * A * (1.0 - A) + state.u2 + state.rho2 * (state.theta - state.z)
    if not np.all(np.isfinite(g)):
        log.warning("non-finite theta gradient %s; step skipped", g)
        return state.theta
    if state.nonneg_projection:
        g = np.maximum(g, 0.0)
    step = state.lr_theta * g
    if state.theta_clip is not None:
        # trust region: one noisy validation batch cannot move a ratio far
        step = np.clip(step, -state.theta_clip, state.theta_clip)
    state.theta = state.theta - step
    return state.theta


def _violation(model: BudgetLike, z, budget):
    return float(eval_budget(model, expit(z))) - budget


def z_grad(state: AllocState, model: BudgetLike, budget: float) -> np.ndarray:
    A = expit(state.z)
    v = float(eval_budget(model, A)) - budget
    hinge = max(v, 0.0)
    if state.square_hinge:
        coef = state.u1 * (v > 0) + state.rho1 * hinge
    else:
        # (rho1/2) * (F - B)^2 on the raw difference
        coef = state.u1 * (v > 0) + state.rho1 * v
    return coef * eval_budget_grad(model, A) * A * (1.0 - A) - state.u2 - state.rho2 * (state.theta - state.z)


def z_step(state: AllocState, model: BudgetLike, budget: float) -> np.ndarray:
    """Inner min-max on the auxiliary variable.

    Each inner iteration takes one descent step on ``z`` and one ascent
    step on ``u1`` with the hinged budget violation.
    """
    for _ in range(state.inner_steps):
        state.z = state.z - state.eta_z * z_grad(state, model, budget)
        if not np.all(np.isfinite(state.z)) or np.abs(state.z).max() > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"z diverged: |z|max={np.abs(state.z).max():.3g}, u1={state.u1:.3g}, "
                f"u2={state.u2.tolist()}, theta={state.theta.tolist()}"
            )
        state.u1 = max(0.0, state.u1 + state.rho1 * max(_violation(model, state.z, budget), 0.0))
    return state.z


def dual_step(state: AllocState) -> np.ndarray:
    state.u2 = state.u2 + state.rho2 * (state.theta - state.z)
    return state.u2


def outer_iteration(state: AllocState, dLv_dA, model: BudgetLike, budget: float) -> np.ndarray:
    """theta step, z min-max, dual ascent; returns the new keep ratios."""
    theta_step(state, dLv_dA)
    z_step(state, model, budget)
    dual_step(state)
    state.iteration += 1
    return current_alpha(state)


class NormalizedBudget:
    """Budget model rescaled to ``scale * F(A) / F(1)``.

    Raw FLOPs are in the millions, which makes the fixed penalty and step
    sizes of the inner solver blow up; the allocator works on this
    normalised copy instead.
    """

    def __init__(self, model: BudgetLike, scale: float = 1000.0):
        full = float(eval_budget(model, np.ones(len(model.F_B))))
        if full <= 0:
            raise ValueError("budget model has zero full-network cost")
        self.full = full
        self.scale = scale
        self.F_A = np.asarray(model.F_A, dtype=float) * (scale / full)
        self.F_B = np.asarray(model.F_B, dtype=float) * (scale / full)

    def target(self, fraction: float) -> float:
        return fraction * self.scale

    def fraction(self, A) -> float:
        return float(eval_budget(self, A)) / self.scale

