"""Run configuration: dataclasses plus strict JSON parsing."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DatasetSpec


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class FlowConfig:
    """Hyperparameters of one pruning run. Defaults are the CIFAR-10 recipe."""

    budget_fraction: float = 0.5
    total_epochs: int = 300
    warmup_epochs: int = 20
    val_fraction: float = 0.10
    weight_steps_per_alloc: int = 20
    mc_samples: int = 1
    batch_size: int = 128
    lr: float = 0.05
    lr_milestones: list[int] = field(default_factory=lambda: [120, 180, 240])
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    beta2_initial: float = 0.05
    beta2_multiplier: float = 1.1
    rho1: float = 0.01
    rho2: float = 0.01
    eta_z: float = 1e-3
    inner_steps: int = 50
    lv_scale: float = 1e5
    lr_theta: float = 1e-2
    nonneg_projection: bool = True
    square_hinge: bool = True
    theta_clip: float | None = None
    land_on_budget: bool = True
    budget_scale: float = 1000.0
    final_inexactness: float = 0.01
    min_channels: int = 1
    finetune_epochs: int = 0
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 < self.budget_fraction <= 1.0:
            errs.append(f"budget_fraction must lie in (0, 1], got {self.budget_fraction}")
        if not 0.0 < self.val_fraction < 0.5:
            errs.append(f"val_fraction must lie in (0, 0.5), got {self.val_fraction}")
        if self.warmup_epochs < 0 or self.total_epochs < self.warmup_epochs:
            errs.append("need 0 <= warmup_epochs <= total_epochs")
        for name in ("weight_steps_per_alloc", "mc_samples", "batch_size", "inner_steps"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.theta_clip is not None and self.theta_clip <= 0:
            errs.append("theta_clip must be positive or null")
        if self.min_channels < 0:
            errs.append("min_channels must be >= 0")
        if self.beta2_initial <= 0 or self.beta2_multiplier <= 1:
            errs.append("beta2 schedule must start positive and grow")
        if self.dtype not in ("float32", "float64"):
            errs.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        return errs


@dataclass
class ExperimentConfig:
    graph: str
    dataset: DatasetSpec
    flow: FlowConfig
    out: str = "runs/default"
    baseline: bool = False
    sensitivity_ratios: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    source: str | None = None


def _build(cls, doc: Any, where: str, errs: list[str]):
    if not isinstance(doc, dict):
        errs.append(f"{where}: expected an object")
        return None
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(names))
    for key in unknown:
        errs.append(f"{where}: unknown key {key!r}")
    missing = [
        n
        for n, f in names.items()
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING and n not in doc
    ]
    for key in missing:
        errs.append(f"{where}: missing required key {key!r}")
    if unknown or missing:
        return None
    try:
        return cls(**doc)
    except TypeError as e:
        errs.append(f"{where}: {e}")
        return None


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load and validate an experiment config; raises :class:`ConfigError`."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}:{e.lineno}:{e.colno}: {e.msg}"]) from None
    return config_from_dict(doc, base=path.parent, source=str(path))


def config_from_dict(doc: Any, base: Path | None = None, source: str | None = None) -> ExperimentConfig:
    errs: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    doc = dict(doc)
    allowed = {"graph", "dataset", "flow", "out", "baseline", "sensitivity_ratios"}
    for key in sorted(set(doc) - allowed):
        errs.append(f"unknown key {key!r}")
    if "graph" not in doc:
        errs.append("missing required key 'graph'")
    flow = _build(FlowConfig, doc.get("flow", {}), "flow", errs)
    ds = _build(DatasetSpec, doc.get("dataset", {"kind": "synthetic"}), "dataset", errs)
    if flow is not None:
        errs.extend(f"flow: {e}" for e in flow.validate())
    if ds is not None and ds.kind not in ("synthetic", "mnist", "cifar10"):
        errs.append(f"dataset: unknown kind {ds.kind!r}")
    ratios = doc.get("sensitivity_ratios", [0.25, 0.5, 0.75])
    if not all(isinstance(r, (int, float)) and 0 < r <= 1 for r in ratios):
        errs.append("sensitivity_ratios must lie in (0, 1]")
    if errs:
        raise ConfigError(errs)
    graph = str(doc["graph"])
    if base is not None:
        if not Path(graph).is_absolute():
            graph = str((base / graph).resolve())
        if ds.path is not None and not Path(ds.path).is_absolute():
            ds.path = str((base / ds.path).resolve())
    return ExperimentConfig(
        graph=graph,
        dataset=ds,
        flow=flow,
        out=str(doc.get("out", "runs/default")),
        baseline=bool(doc.get("baseline", False)),
        sensitivity_ratios=[float(r) for r in ratios],
        source=source,
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("source", None)
    return d
