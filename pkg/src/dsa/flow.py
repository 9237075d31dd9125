"""End-to-end differentiable sparsity allocation and the sensitivity analysis."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import __version__
from .admm import AllocState, NormalizedBudget, current_alpha, land_on_budget, outer_iteration
from .config import FlowConfig
from .data import Dataset
from .graph import (
    GroupAssignment,
    NetGraph,
    build_flops_model,
    count_flops,
    eval_budget,
    topological_group,
)
from .nn import Batch, ModelState, accuracy, backward, forward, init_model, sgd_step
from .prune import (
    Beta2Schedule,
    PruneGroupState,
    SaturationError,
    beta2_at,
    dL_dalpha,
    finalize_hard,
    inexactness,
)

log = logging.getLogger(__name__)

SCHEMA = 1


class PruningError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    beta2: float
    train_loss: float
    val_loss: float
    val_acc: float
    flops_ratio: float
    inexactness: float
    alpha: list[float]


@dataclass
class RunReport:
    schema: int
    version: str
    seed: int
    config: dict
    K: int
    group_members: list[list[str]]
    group_channels: list[int]
    full_flops: int
    budget_flops: float
    epochs: list[EpochRecord] = field(default_factory=list)
    allocation_iterations: int = 0
    budget_reached_epoch: int | None = None
    grad_magnitudes: list[float] | None = None
    sharpening_steps: int = 0
    final_beta2: float | None = None
    final_alpha: list[float] | None = None
    kept_channels: list[int] | None = None
    kept_fraction: list[float] | None = None
    final_flops: int | None = None
    final_inexactness: float | None = None
    peak_inexactness: float = 0.0
    test_accuracy: float | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("timings")
        return d


@dataclass
class RunResult:
    report: RunReport
    model: ModelState
    masks: list[np.ndarray]
    warmup_model: ModelState | None = None  # snapshot taken when allocation starts


def _lr_at(cfg: FlowConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_gamma ** sum(epoch >= m for m in cfg.lr_milestones)


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = idx[rng.permutation(len(idx))]
    for i in range(0, len(perm), batch_size):
        yield perm[i : i + batch_size]


class _Cycle:
    """Endless shuffled mini-batches over a fixed index set."""

    def __init__(self, idx, batch_size, rng):
        self.idx, self.bs, self.rng = idx, batch_size, rng
        self._it = iter(())

    def next(self):
        for b in self._it:
            return b
        self._it = _batches(self.idx, self.bs, self.rng)
        return next(self._it)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class _Pruner:
    """Per-group pruning states kept in sync with the live model."""

    def __init__(self, model: ModelState, alpha: np.ndarray, beta2: float):
        self.model = model
        self.states = [
            PruneGroupState(float(a), beta2, model.group_importance(k)) for k, a in enumerate(alpha)
        ]

    def refresh(self, alpha=None, beta2=None, importance=True):
        for k, st in enumerate(self.states):
            if alpha is not None:
                st.alpha = float(alpha[k])
            if beta2 is not None:
                st.beta2 = beta2
            if importance:
                st.b = self.model.group_importance(k)
            st.solve()

    @property
    def probs(self):
        return [st.p for st in self.states]

    def sample(self, rng):
        return [st.sample(rng) for st in self.states]

    def inexactness(self) -> float:
        return float(sum(inexactness(st.p) for st in self.states))

    def alpha_grad(self, dmask) -> np.ndarray:
        out = np.zeros(len(self.states))
        for k, st in enumerate(self.states):
            try:
                out[k] = dL_dalpha(dmask[k], st.b, st.beta1, st.beta2)
            except SaturationError:
                out[k] = 0.0
        return out


def validation_alpha_grad(model: ModelState, pruner: _Pruner, batch: Batch, samples: int, rng) -> np.ndarray:
    """Monte-Carlo ``dL/dalpha`` per group on one batch; weights untouched."""
    acc = [np.zeros(st.C) for st in pruner.states]
    for _ in range(samples):
        masks = pruner.sample(rng)
        _, cache = forward(model, batch, masks, "sampled", training=True, update_stats=False)
        _, dmask = backward(cache)
        for k in range(len(acc)):
            acc[k] += dmask[k]
    return pruner.alpha_grad([a / samples for a in acc])


def _evaluate(model: ModelState, x, y, masks, mode, batch_size=500) -> tuple[float, float]:
    losses, correct = 0.0, 0
    for i in range(0, len(y), batch_size):
        b = Batch(x[i : i + batch_size], y[i : i + batch_size])
        loss, cache = forward(model, b, masks, mode, training=False)
        losses += loss * len(b)
        correct += int((cache.logits.argmax(axis=1) == b.labels).sum())
    return losses / max(len(y), 1), correct / max(len(y), 1)


def finalize_counts(
    graph: NetGraph,
    groups: GroupAssignment,
    states: Sequence[PruneGroupState],
    alpha: np.ndarray,
    budget_flops: float,
    min_channels: int = 1,
) -> list[int]:
    """Integer channel count per group whose exact FLOPs fit the budget.

    The hard threshold ``b >= beta1`` is used when it lands within one
    channel of ``alpha * C``; otherwise ``ceil(alpha * C)``. If the exact
    recount exceeds the budget, channels are dropped one at a time where
    they save the most FLOPs, first only from groups still above
    ``floor(alpha * C)`` and then from any group above the channel floor.
    """
    kept, lower = [], []
    for k, st in enumerate(states):
        C = st.C
        target = float(alpha[k]) * C
        n = int(finalize_hard(st.b, st.beta1).sum())
        if abs(n - target) > 1:
            n = int(math.ceil(target - 1e-9))
        if n < max(min_channels, 1):
            if min_channels == 0:
                raise PruningError(f"group {k} finalizes to zero channels")
            n = min_channels
        kept.append(min(n, C))
        lower.append(max(int(math.floor(target + 1e-9)), min_channels, 1))

    def shrink(bounds):
        while count_flops(graph, groups, kept) > budget_flops:
            cur = count_flops(graph, groups, kept)
            best, best_save = None, 0
            for k in range(len(kept)):
                if kept[k] <= bounds[k]:
                    continue
                trial = list(kept)
                trial[k] -= 1
                save = cur - count_flops(graph, groups, trial)
                if save > best_save:
                    best, best_save = k, save
            if best is None:
                return
            kept[best] -= 1

    shrink(lower)
    shrink([max(min_channels, 1)] * len(kept))
    if count_flops(graph, groups, kept) > budget_flops:
        raise PruningError("budget cannot be met with the channel floor")
    return kept


def top_n_mask(b: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros(len(b))
    m[np.argsort(-np.asarray(b), kind="stable")[:n]] = 1.0
    return m


def run_dsa(cfg: FlowConfig, graph: NetGraph, data: Dataset, progress=None) -> RunResult:
    """Train from scratch while allocating per-group keep ratios under the budget."""
    t0 = time.perf_counter()
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    groups = topological_group(graph)
    budget = build_flops_model(graph, groups)
    full = int(budget.full_flops)
    budget_flops = cfg.budget_fraction * full
    widths = groups.channels(graph)
    floor = [max(cfg.min_channels, 1)] * groups.K
    if count_flops(graph, groups, floor) > budget_flops:
        raise ValueError(
            f"budget {budget_flops:.0f} FLOPs is below the {floor[0]}-channel-per-group floor "
            f"({count_flops(graph, groups, floor)} FLOPs)"
        )
    norm = NormalizedBudget(budget, cfg.budget_scale)
    target = norm.target(cfg.budget_fraction)

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, split_rng, shuffle_rng, val_rng, mask_rng = (np.random.default_rng(s) for s in ss.spawn(5))
    train_idx, val_idx = split_indices(len(data.train_y), cfg.val_fraction, split_rng)
    all_idx = np.arange(len(data.train_y))
    model = init_model(graph, init_rng, groups, dtype=dtype)

    alloc = AllocState.initial(
        groups.K,
        rho1=cfg.rho1,
        rho2=cfg.rho2,
        eta_z=cfg.eta_z,
        inner_steps=cfg.inner_steps,
        lv_scale=cfg.lv_scale,
        lr_theta=cfg.lr_theta,
        nonneg_projection=cfg.nonneg_projection,
        square_hinge=cfg.square_hinge,
        theta_clip=cfg.theta_clip,
    )
    schedule = Beta2Schedule(cfg.beta2_initial, cfg.beta2_multiplier)
    prune_enabled = full > budget_flops
    feasible = not prune_enabled
    pruner: _Pruner | None = None
    val_cycle = _Cycle(val_idx, cfg.batch_size, val_rng)
    report = RunReport(
        schema=SCHEMA,
        version=__version__,
        seed=cfg.seed,
        config=asdict(cfg),
        K=groups.K,
        group_members=[groups.members(k) for k in range(groups.K)],
        group_channels=widths,
        full_flops=full,
        budget_flops=budget_flops,
    )
    warmup_model = None
    grad_sum = np.zeros(groups.K)
    grad_count = 0
    first_alloc_epoch = None

    def batch_of(idx):
        return Batch(data.train_x[idx], data.train_y[idx])

    for epoch in range(cfg.total_epochs):
        lr = _lr_at(cfg, epoch)
        warm = epoch < cfg.warmup_epochs or not prune_enabled
        beta2 = beta2_at(schedule, max(0, epoch - cfg.warmup_epochs))
        if warm:
            phase = "warmup" if prune_enabled else "plain"
        else:
            phase = "post" if feasible else "allocation"
            if pruner is None:
                warmup_model = model.copy()
                pruner = _Pruner(model, current_alpha(alloc), beta2)
            pruner.refresh(beta2=beta2)
        # the validation split is held out only while keep ratios are being learned
        epoch_idx = train_idx if phase == "allocation" else all_idx
        losses = []
        for step, idx in enumerate(_batches(epoch_idx, cfg.batch_size, shuffle_rng)):
            masks = None
            if pruner is not None:
                if step % cfg.weight_steps_per_alloc == 0:
                    pruner.refresh()
                    if not feasible:
                        if first_alloc_epoch is None:
                            first_alloc_epoch = epoch
                        g = validation_alpha_grad(model, pruner, batch_of(val_cycle.next()), cfg.mc_samples, mask_rng)
                        if epoch == first_alloc_epoch:
                            grad_sum += np.abs(g)
                            grad_count += 1
                        prev = alloc.theta.copy()
                        A = outer_iteration(alloc, g, norm, target)
                        if cfg.land_on_budget:
                            A = expit(land_on_budget(alloc, prev, norm, target))
                        report.allocation_iterations += 1
                        log.debug(
                            "alloc %d dL/dA %s u1 %.3g u2 %s z %s A %s",
                            alloc.iteration, np.round(g, 5).tolist(), alloc.u1, np.round(alloc.u2, 3).tolist(),
                            np.round(alloc.z, 2).tolist(), np.round(A, 4).tolist(),
                        )
                        pruner.refresh(alpha=A, importance=False)
                        if norm.fraction(A) <= cfg.budget_fraction * (1 + 1e-9):
                            feasible = True
                            report.budget_reached_epoch = epoch
                masks = pruner.sample(mask_rng)
            loss, cache = forward(model, batch_of(idx), masks, "sampled", training=True)
            grads, _ = backward(cache)
            sgd_step(model, grads, lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss)

        A = current_alpha(alloc) if pruner is not None else np.ones(groups.K)
        eval_masks = pruner.probs if pruner is not None else None
        vx, vy = data.train_x[val_idx], data.train_y[val_idx]
        val_loss, val_acc = _evaluate(model, vx, vy, eval_masks, "relaxed")
        E = pruner.inexactness() if pruner is not None else 0.0
        report.peak_inexactness = max(report.peak_inexactness, E)
        rec = EpochRecord(
            epoch=epoch,
            phase=phase,
            lr=lr,
            beta2=beta2 if pruner is not None else 0.0,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            val_acc=val_acc,
            flops_ratio=float(eval_budget(budget, A)) / full if pruner is not None else 1.0,
            inexactness=E,
            alpha=[float(a) for a in A],
        )
        report.epochs.append(rec)
        log.info(
            "epoch %d %s loss %.4f val %.4f/%.4f flops %.3f E %.3g alpha %s",
            epoch, phase, rec.train_loss, val_loss, val_acc, rec.flops_ratio, E, np.round(A, 3).tolist(),
        )
        if progress is not None:
            progress(rec)

    report.timings["train_s"] = time.perf_counter() - t0
    report.grad_magnitudes = (grad_sum / grad_count).tolist() if grad_count else None

    if pruner is None:
        masks = [np.ones(c) for c in widths]
        report.final_alpha = [1.0] * groups.K
    else:
        A = current_alpha(alloc)
        report.final_alpha = [float(a) for a in A]
        pruner.refresh()
        counts = finalize_counts(graph, groups, pruner.states, A, budget_flops, cfg.min_channels)
        # Sharpen at the rounded ratios n/C: with a fractional alpha*C one
        # channel would stay at an intermediate probability for any beta2.
        total_c = sum(widths)
        beta2 = pruner.states[0].beta2
        pruner.refresh(alpha=[n / c for n, c in zip(counts, widths)], importance=False)
        while pruner.inexactness() > cfg.final_inexactness * total_c and report.sharpening_steps < 10000:
            beta2 *= cfg.beta2_multiplier
            pruner.refresh(beta2=beta2, importance=False)
            report.sharpening_steps += 1
        report.final_inexactness = pruner.inexactness()
        report.final_beta2 = beta2
        masks = []
        for st, n in zip(pruner.states, counts):
            m = finalize_hard(st.b, st.beta1)
            masks.append(m if int(m.sum()) == n else top_n_mask(st.b, n))

    kept = [int(m.sum()) for m in masks]
    report.kept_channels = kept
    report.kept_fraction = [k / c for k, c in zip(kept, widths)]
    report.final_flops = count_flops(graph, groups, kept)
    if report.final_flops > budget_flops:
        raise PruningError(f"finalized FLOPs {report.final_flops} exceed budget {budget_flops}")

    t1 = time.perf_counter()
    for ft in range(cfg.finetune_epochs):
        lr = _lr_at(cfg, cfg.total_epochs + ft)
        for idx in _batches(all_idx, cfg.batch_size, shuffle_rng):
            _, cache = forward(model, batch_of(idx), masks, "hard", training=True)
            grads, _ = backward(cache)
            sgd_step(model, grads, lr, cfg.momentum, cfg.weight_decay)
    report.timings["finetune_s"] = time.perf_counter() - t1
    report.test_accuracy = accuracy(model, data.test_x, data.test_y, masks, "hard")
    report.timings["total_s"] = time.perf_counter() - t0
    return RunResult(report, model, masks, warmup_model)


def pruned_graph(graph: NetGraph, groups: GroupAssignment, kept: Sequence[int]) -> NetGraph:
    """Copy of ``graph`` with every grouped conv narrowed to its kept width."""
    from .graph import DEPTHWISE_CONV, Node

    nodes = []
    for n in graph.nodes:
        if n.id in groups.group_of:
            attrs = dict(n.attrs)
            c = int(kept[groups.group_of[n.id]])
            if n.kind == DEPTHWISE_CONV:
                attrs.pop("C", None)
            else:
                attrs["C"] = c
            n = Node(n.id, n.kind, n.inputs, attrs)
        nodes.append(n)
    return NetGraph(nodes)


# ---- sensitivity analysis ---------------------------------------------------


def top_mask(b: np.ndarray, ratio: float) -> np.ndarray:
    """Keep the ``ceil(ratio * C)`` most important channels."""
    return top_n_mask(b, int(math.ceil(ratio * len(b) - 1e-9)))


def sensitivity_analysis(model: ModelState, ratios: Sequence[float], x, y) -> dict:
    """Accuracy when each group alone is hard-pruned to each keep ratio."""
    base = accuracy(model, x, y, None, "hard")
    table = []
    for k in range(model.groups.K):
        b = model.group_importance(k)
        row = []
        for r in ratios:
            masks: list = [None] * model.groups.K
            masks[k] = top_mask(b, r)
            row.append(accuracy(model, x, y, masks, "hard"))
        table.append(row)
    drops = [base - float(np.mean(row)) for row in table]
    return {"baseline": base, "ratios": list(ratios), "accuracy": table, "drops": drops}


def normalize_magnitudes(v) -> np.ndarray:
    """``softmax(v / std(v))``; uniform when ``std(v) == 0``."""
    v = np.asarray(v, dtype=float)
    s = v.std()
    if s == 0 or not np.isfinite(s):
        return np.full(len(v), 1.0 / len(v))
    z = v / s
    z = np.exp(z - z.max())
    return z / z.sum()


def emit_alignment_data(grad_mags, sens_drops, path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    g = normalize_magnitudes(grad_mags)
    s = normalize_magnitudes(sens_drops)
    if len(g) != len(s):
        raise ValueError("gradient and sensitivity vectors differ in length")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "grad_magnitude", "sensitivity_drop", "grad_normalized", "sensitivity_normalized"])
        for k in range(len(g)):
            w.writerow([k, repr(float(grad_mags[k])), repr(float(sens_drops[k])), repr(float(g[k])), repr(float(s[k]))])
    return g, s


def write_metrics_csv(report: RunReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["epoch", "train_loss", "val_loss", "val_acc", "flops_ratio", "inexactness"]
            + [f"alpha_{k}" for k in range(report.K)]
        )
        for r in report.epochs:
            w.writerow([r.epoch, r.train_loss, r.val_loss, r.val_acc, r.flops_ratio, r.inexactness] + r.alpha)
