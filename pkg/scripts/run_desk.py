#!/usr/bin/env python
"""Desk-scale experiment: pruned run, unpruned baseline and the alignment check.

Usage: python scripts/run_desk.py [configs/desk_mnist.json] [--out runs/desk] [--overwrite]

Writes report.json / metrics.csv for both runs, sensitivity.json and
alignment.csv, and prints a short summary.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import time
from pathlib import Path

from scipy.stats import spearmanr

from dsa.data import load_dataset
from dsa.flow import emit_alignment_data, run_dsa, sensitivity_analysis, write_metrics_csv
from dsa.config import parse_config
from dsa.graph import NetGraph

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default=str(ROOT / "configs" / "desk_mnist.json"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--overwrite", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise SystemExit(f"{out} is not empty; pass --overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = parse_config(args.config)
    graph = NetGraph.load(cfg.graph)
    data = load_dataset(cfg.dataset)

    t0 = time.perf_counter()
    pruned = run_dsa(cfg.flow, graph, data)
    wall = time.perf_counter() - t0
    baseline = run_dsa(dataclasses.replace(cfg.flow, budget_fraction=1.0), graph, data)
    for name, res in (("pruned", pruned), ("baseline", baseline)):
        (out / name).mkdir()
        (out / name / "report.json").write_text(json.dumps(res.report.to_dict(), indent=2))
        write_metrics_csv(res.report, out / name / "metrics.csv")

    r = pruned.report
    sens = sensitivity_analysis(pruned.warmup_model, cfg.sensitivity_ratios, data.test_x, data.test_y)
    (out / "sensitivity.json").write_text(json.dumps(sens, indent=2))
    g, s = emit_alignment_data(r.grad_magnitudes, sens["drops"], out / "alignment.csv")

    summary = {
        "final_flops": r.final_flops,
        "budget_flops": r.budget_flops,
        "test_accuracy": r.test_accuracy,
        "baseline_accuracy": baseline.report.test_accuracy,
        "accuracy_drop_pp": 100 * (baseline.report.test_accuracy - r.test_accuracy),
        "wall_minutes": wall / 60,
        "kept_channels": r.kept_channels,
        "final_alpha": r.final_alpha,
        "inexactness_ratio": r.peak_inexactness / r.final_inexactness,
        "spearman": float(spearmanr(g, s).statistic),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
