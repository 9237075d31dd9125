"""Probabilistic differentiable channel pruning.

Channel ``i`` of a group is kept with probability
``p_i = 1 / (1 + (b_i / beta1) ** -beta2)``, a sigmoid of ``log b_i``.
``beta1`` is solved so that the expected kept fraction equals the keep ratio
``alpha``; ``beta2`` sharpens over training until the masks are
deterministic and ``beta1`` acts as a hard threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

IMPORTANCE_FLOOR = 1e-12
SATURATION_EPS = 1e-12


class SolverError(RuntimeError):
    pass


class SaturationError(ArithmeticError):
    """All keep probabilities of a group are (numerically) 0 or 1."""


@dataclass(frozen=True)
class Beta2Schedule:
    initial: float = 0.05
    multiplier: float = 1.1

    def __post_init__(self):
        if self.initial <= 0 or self.multiplier <= 1:
            raise ValueError("beta2 schedule must start positive and strictly increase")


def beta2_at(schedule: Beta2Schedule, epoch: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.initial * schedule.multiplier**epoch


def _positive(name, x):
    x = np.asarray(x, dtype=float)
    if not np.all(x > 0):
        raise ValueError(f"{name} must be positive")
    return x


def _logits(b, log_beta1, beta2):
    return beta2 * (np.log(b) - log_beta1)


def keep_prob(b, beta1, beta2):
    """Keep probability of importance(s) ``b``; vectorised over ``b``."""
    b = _positive("importance", b)
    _positive("beta1", beta1)
    _positive("beta2", beta2)
    p = expit(_logits(b, math.log(beta1), beta2))
    return p if p.ndim else float(p)


def dkeep_prob_dbeta1(b, beta1, beta2):
    b = _positive("importance", b)
    p = expit(_logits(b, math.log(beta1), beta2))
    return -beta2 / beta1 * p * (1.0 - p)


def expected_fraction(b, beta1, beta2) -> float:
    return float(np.mean(keep_prob(b, beta1, beta2)))


def solve_beta1(b, alpha: float, beta2: float, tol: float = 1e-10, max_doublings: int = 200) -> float:
    """Soft threshold ``beta1`` such that ``mean(keep_prob(b, beta1, beta2)) == alpha``.

    Bisection in ``log beta1`` on a bracket starting at
    ``[min(b) * 1e-6, max(b) * 1e6]``; the bracket's log-width is doubled
    until it straddles the root. ``g`` is strictly decreasing in ``beta1``.
    """
    b = _positive("importance", np.atleast_1d(b))
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if beta2 <= 0:
        raise ValueError("beta2 must be positive")
    logb = np.log(b)

    def g(L):
        return float(np.mean(expit(beta2 * (logb - L)))) - alpha

    lo = logb.min() - math.log(1e6)
    hi = logb.max() + math.log(1e6)
    for _ in range(max_doublings):
        if g(lo) > 0:
            break
        lo -= hi - lo
    else:
        raise SolverError(f"could not bracket beta1 from below (alpha={alpha}, beta2={beta2})")
    for _ in range(max_doublings):
        if g(hi) < 0:
            break
        hi += hi - lo
    else:
        raise SolverError(f"could not bracket beta1 from above (alpha={alpha}, beta2={beta2})")

    best, best_g = lo, g(lo)
    while True:
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        gm = g(mid)
        if abs(gm) < abs(best_g):
            best, best_g = mid, gm
        if gm == 0.0:
            break
        if gm > 0:
            lo = mid
        else:
            hi = mid
    # At large beta2 g is nearly a step function and may jump by more than
    # tol between adjacent floats; the root is then as located as it can be.
    jump = abs(g(lo) - g(hi))
    if abs(best_g) > max(tol, jump):
        raise SolverError(f"bisection stalled at |g|={abs(best_g):.3g} > {tol}")
    return math.exp(best)


def sample_masks(p, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    return (rng.random(p.shape) < p).astype(float)


def inexactness(p) -> float:
    p = np.asarray(p, dtype=float)
    return float(np.sum(p * (1.0 - p)))


def _aggregation_weights(b, beta1, beta2):
    p = expit(_logits(np.asarray(b, dtype=float), math.log(beta1), beta2))
    if np.all((p <= SATURATION_EPS) | (p >= 1.0 - SATURATION_EPS)):
        raise SaturationError("all keep probabilities are saturated")
    fprime = -beta2 / beta1 * p * (1.0 - p)
    total = fprime.sum()
    if total == 0.0:
        raise SaturationError("derivative of the expected keep fraction vanished")
    return fprime, total


def dbeta1_dalpha(b, beta1: float, beta2: float) -> float:
    """Implicit derivative of the solved threshold w.r.t. the keep ratio."""
    b = _positive("importance", np.atleast_1d(b))
    _, total = _aggregation_weights(b, beta1, beta2)
    return len(b) / total


def dL_dalpha(dL_dp, b, beta1: float, beta2: float) -> float:
    """Chain the per-channel loss gradient onto the group keep ratio.

    The result is ``C * sum(dL_dp * w)`` where ``w`` are the normalised
    derivatives of the keep probabilities w.r.t. ``beta1`` (nonnegative,
    summing to one).
    """
    b = _positive("importance", np.atleast_1d(b))
    dL_dp = np.asarray(dL_dp, dtype=float)
    if dL_dp.shape != b.shape:
        raise ValueError(f"gradient shape {dL_dp.shape} != importance shape {b.shape}")
    fprime, total = _aggregation_weights(b, beta1, beta2)
    return float(len(b) * np.dot(dL_dp, fprime / total))


def finalize_hard(b, beta1: float) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    return (b >= beta1).astype(float)


def importance_from_scales(gammas) -> np.ndarray:
    """Base importance ``|gamma|`` floored so it stays strictly positive."""
    return np.maximum(np.abs(np.asarray(gammas, dtype=float)), IMPORTANCE_FLOOR)


@dataclass
class PruneGroupState:
    alpha: float
    beta2: float
    b: np.ndarray
    beta1: float = float("nan")
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def C(self) -> int:
        return len(self.b)

    def solve(self, alpha_cap: float = 1.0 - 1e-9) -> None:
        """Refresh ``beta1`` and ``p`` for the current ``alpha``/``beta2``/``b``."""
        a = min(max(self.alpha, 1e-9), alpha_cap)
        self.beta1 = solve_beta1(self.b, a, self.beta2)
        self.p = np.asarray(keep_prob(self.b, self.beta1, self.beta2), dtype=float)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        self.m = sample_masks(self.p, rng)
        return self.m

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "b": self.b.tolist(),
            "p": self.p.tolist(),
            "m": self.m.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "PruneGroupState":
        return cls(d["alpha"], d["beta2"], np.asarray(d["b"]), d["beta1"], np.asarray(d["p"]), np.asarray(d["m"]))
