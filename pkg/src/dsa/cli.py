"""``dsa`` command line: run, sensitivity, budget, group.

Every subcommand prints a JSON document on stdout. Failures print
``{"schema": 1, "error": <type>, "message": ...}`` on stderr and exit
nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, config_to_dict, parse_config
from .data import load_dataset
from .flow import SCHEMA, emit_alignment_data, run_dsa, sensitivity_analysis, write_metrics_csv
from .graph import NetGraph, build_flops_model, count_flops, eval_budget, topological_group

log = logging.getLogger("dsa")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE, **details):
        super().__init__(message)
        self.kind, self.code, self.details = kind, code, details


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, overwrite: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise CliError("OutputExists", f"{out} is not empty; pass --overwrite to replace it", code=EXIT_USAGE)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args):
    path = args.config_pos or args.config
    if path is None:
        raise CliError("UsageError", "a config file is required", code=EXIT_USAGE)
    cfg = parse_config(path)
    if args.seed is not None:
        cfg.flow.seed = args.seed
    if getattr(args, "budget", None) is not None:
        cfg.flow.budget_fraction = args.budget
        errs = cfg.flow.validate()
        if errs:
            raise ConfigError(errs)
    return cfg


def _parse_alpha(text: str) -> np.ndarray:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError("UsageError", f"--alpha expects comma-separated numbers, got {text!r}", code=EXIT_USAGE)
    a = np.array(vals)
    if not np.all((a >= 0) & (a <= 1)):
        raise CliError("UsageError", "keep ratios must lie in [0, 1]", code=EXIT_USAGE)
    return a


def cmd_run(args) -> dict:
    cfg = _load_config(args)
    out = _prepare_out(Path(args.out or cfg.out), args.overwrite)
    graph = NetGraph.load(cfg.graph)
    data = load_dataset(cfg.dataset)
    result = run_dsa(cfg.flow, graph, data)
    report = result.report.to_dict()
    report["experiment"] = config_to_dict(cfg)
    if cfg.baseline:
        base_cfg = dataclasses.replace(cfg.flow, budget_fraction=1.0)
        base = run_dsa(base_cfg, graph, data)
        report["baseline_accuracy"] = base.report.test_accuracy
        report["accuracy_drop"] = base.report.test_accuracy - result.report.test_accuracy
    meta = {"seed": cfg.flow.seed, "version": __version__, "config": config_to_dict(cfg)}
    save_checkpoint(out / "final.ckpt", result.model, result.masks, {**meta, "stage": "final"})
    if result.warmup_model is not None:
        save_checkpoint(out / "warmup.ckpt", result.warmup_model, None, {**meta, "stage": "warmup"})
    write_metrics_csv(result.report, out / "metrics.csv")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return {
        "schema": SCHEMA,
        "out": str(out),
        "kept_channels": report["kept_channels"],
        "final_flops": report["final_flops"],
        "budget_flops": report["budget_flops"],
        "test_accuracy": report["test_accuracy"],
        "baseline_accuracy": report.get("baseline_accuracy"),
    }


def cmd_sensitivity(args) -> dict:
    cfg = _load_config(args)
    ckpt = Path(args.checkpoint)
    out = _prepare_out(Path(args.out) if args.out else ckpt.parent / "sensitivity", args.overwrite)
    model, _, extra = load_checkpoint(ckpt)
    data = load_dataset(cfg.dataset)
    table = sensitivity_analysis(model, cfg.sensitivity_ratios, data.test_x, data.test_y)
    doc = {"schema": SCHEMA, "version": __version__, "checkpoint": str(ckpt), "seed": extra.get("seed"), **table}
    report_path = ckpt.parent / "report.json"
    if report_path.exists():
        grads = json.loads(report_path.read_text()).get("grad_magnitudes")
        if grads is not None and len(grads) == len(table["drops"]):
            g, s = emit_alignment_data(grads, table["drops"], out / "alignment.csv")
            rho = spearmanr(g, s).statistic if model.groups.K > 1 else float("nan")
            doc["grad_magnitudes"] = grads
            doc["spearman"] = None if np.isnan(rho) else float(rho)
    (out / "sensitivity.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def cmd_budget(args) -> dict:
    graph = NetGraph.load(args.graph)
    groups = topological_group(graph)
    model = build_flops_model(graph, groups)
    full = int(model.full_flops)
    doc = {"schema": SCHEMA, **model.to_dict()}
    if args.alpha is not None:
        A = _parse_alpha(args.alpha)
        if len(A) != groups.K:
            raise CliError("UsageError", f"--alpha has {len(A)} entries but the graph has {groups.K} groups", code=EXIT_USAGE)
        flops = float(eval_budget(model, A))
        doc.update(alpha=A.tolist(), flops=flops, fraction=flops / full if full else 0.0)
        widths = groups.channels(graph)
        kept = [int(np.floor(a * c + 1e-9)) for a, c in zip(A, widths)]
        doc["floor_channels"] = kept
        doc["floor_flops"] = count_flops(graph, groups, kept)
    if args.budget is not None:
        doc["budget"] = args.budget * full
    return doc


def cmd_group(args) -> dict:
    graph = NetGraph.load(args.graph)
    groups = topological_group(graph)
    return {
        "schema": SCHEMA,
        "K": groups.K,
        "groups": [groups.members(k) for k in range(groups.K)],
        "channels": groups.channels(graph),
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsa", description="Differentiable sparsity allocation")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and prune under a FLOPs budget", parents=[common])
    r.add_argument("config_pos", nargs="?", metavar="config")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--budget", type=float, help="budget as a fraction of full FLOPs")
    r.add_argument("--overwrite", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sensitivity", help="per-group pruning sensitivity of a checkpoint", parents=[common])
    s.add_argument("config_pos", nargs="?", metavar="config")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_sensitivity)

    b = sub.add_parser("budget", help="FLOPs model of a graph", parents=[common])
    b.add_argument("graph")
    b.add_argument("--alpha", help="comma-separated keep ratios, one per group")
    b.add_argument("--budget", type=float, help="also report this fraction of full FLOPs")
    b.set_defaults(func=cmd_budget)

    g = sub.add_parser("group", help="topological groups of a graph", parents=[common])
    g.add_argument("graph")
    g.set_defaults(func=cmd_group)
    return p


def _fail(kind: str, message: str, code: int, **details) -> int:
    doc = {"schema": SCHEMA, "error": kind, "message": message}
    if details:
        doc["details"] = details
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; add the machine-readable line
        if e.code in (0, None):
            return 0
        return _fail("UsageError", "invalid command line", EXIT_USAGE)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        _emit(args.func(args))
    except CliError as e:
        return _fail(e.kind, str(e), e.code, **e.details)
    except ConfigError as e:
        return _fail("ConfigError", str(e), EXIT_USAGE, problems=e.problems)
    except FileNotFoundError as e:
        return _fail("FileNotFoundError", str(e), EXIT_FAILURE)
    except (ValueError, RuntimeError, ArithmeticError, KeyError) as e:
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
