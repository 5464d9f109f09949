"""Command-line entry point: gen-world, profile, estimate, plan, simulate, report, fit-load."""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import ConfigError, canonical_hash, load_config
from .controller import fit_load_model
from .estimators import METHODS, annotate_estimate, error_report, estimate, write_error_csv
from .planner import Objective, ObjectiveError, PlanResult, select_path
from .profiler import ObservationSet, cascade_sample, cost_ledger, coverage_stats
from .sim import (FRONTIER_FIELDS, GAP_FIELDS, Scenario, frontier_sweep, policy_gap_report, run_scenario,
                  write_rows)
from .trie import AnnotationFileError, load_annotations, prefix_key, save_annotations
from .workload import oracle_trie, true_column_means, world_from_config


class UsageError(Exception):
    pass


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _manifest(out: Path, command: str, args: argparse.Namespace, config: dict, outputs: list[str],
              started: float) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {"subcommand": command, "tool_version": __version__, "arguments": resolved,
           "config_hash": canonical_hash(config) if config else None,
           "seed": config.get("seed") if config else getattr(args, "seed", None),
           "outputs": sorted(outputs), "wall_time_s": round(time.time() - started, 3)}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _world(args):
    doc = load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    return doc, world_from_config(doc)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_world(args) -> int:
    t0 = time.time()
    doc, world = _world(args)
    out = _outdir(args)
    (out / "world.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    truth = true_column_means(world)
    rows = [{"path": prefix_key(p), "depth": len(p), "terminal": int(world.trie.node(p).terminal_eligible),
             "mu": f"{t.acc:.6f}", "cost": f"{t.cost:.6f}", "lat": f"{t.lat:.6f}", "n_reached": t.n_reached}
            for p, t in truth.items()]
    _write_csv(out / "columns.csv", ["path", "depth", "terminal", "mu", "cost", "lat", "n_reached"], rows)
    oracle = oracle_trie(world)
    save_annotations(oracle, out / "oracle_annotations.json")
    # oracle frontier: best accuracy under a grid of cost caps
    costs = sorted({round(t.cost, 6) for t in truth.values()})
    grid = np.quantile(costs, np.linspace(0, 1, 11))
    frontier = []
    for c in grid:
        r = select_path(oracle, Objective("max_acc", cost_cap=float(c)))
        frontier.append({"cost_cap": f"{c:.6f}", "path": prefix_key(r.path) if r.feasible else "INFEASIBLE",
                         "acc": f"{r.acc:.6f}", "cost": f"{r.cost:.6f}", "lat": f"{r.lat:.6f}"})
    _write_csv(out / "frontier.csv", ["cost_cap", "path", "acc", "cost", "lat"], frontier)
    summary = {"n_requests": world.n, "n_nodes": len(world.trie) - 1,
               "n_terminating": int(world.trie.terminal.sum()), "max_depth": world.template.max_depth,
               "models": world.catalog.ids, "seed": world.seed}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _manifest(out, "gen-world", args, doc, ["world.json", "columns.csv", "oracle_annotations.json",
                                            "frontier.csv", "summary.json"], t0)
    return 0


def cmd_profile(args) -> int:
    t0 = time.time()
    if args.coverage is None and args.runs is None:
        raise UsageError("give --coverage or --runs")
    if args.coverage is not None and not 0 < args.coverage <= 1:
        raise UsageError("--coverage must be in (0, 1]")
    if args.runs is not None and args.runs <= 0:
        raise UsageError("--runs must be > 0")
    doc, world = _world(args)
    out = _outdir(args)
    obs = cascade_sample(world, coverage=args.coverage, runs=args.runs if args.coverage is None else None,
                         seed=args.profile_seed)
    obs.save(out / "observations.jsonl")
    cost_ledger(world, obs).write_csv(out / "ledger.csv")
    cs = coverage_stats(obs)
    _write_csv(out / "coverage.csv", ["depth", "cell_fraction", "column_fraction"],
               [{"depth": d, "cell_fraction": f"{cs.cell_fraction[d]:.6f}",
                 "column_fraction": f"{cs.column_fraction[d]:.6f}"} for d in sorted(cs.cell_fraction)])
    _manifest(out, "profile", args, doc, ["observations.jsonl", "ledger.csv", "coverage.csv"], t0)
    return 0


def cmd_estimate(args) -> int:
    t0 = time.time()
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    doc, world = _world(args)
    out = _outdir(args)
    obs = ObservationSet.load(args.obs, world.trie, world.n)
    est = estimate(args.method, obs)
    save_annotations(annotate_estimate(est, obs), out / "annotations.json")
    write_error_csv([error_report(est, true_column_means(world))], out / "errors.csv")
    _manifest(out, "estimate", args, doc, ["annotations.json", "errors.csv"], t0)
    return 0


def cmd_plan(args) -> int:
    t0 = time.time()
    try:
        obj = Objective.parse(args.objective)
    except ObjectiveError as exc:
        raise UsageError(str(exc)) from None
    doc, world = _world(args)
    out = _outdir(args)
    trie = load_annotations(args.annotations, world.template, world.catalog, force=args.force)
    res = select_path(trie, obj)
    _write_csv(out / "plan.csv", PlanResult.CSV_FIELDS, [res.csv_row()])
    _manifest(out, "plan", args, doc, ["plan.csv"], t0)
    if not res.feasible:
        print(f"infeasible: binding constraint {res.binding}", file=sys.stderr)
        return 1
    return 0


def cmd_simulate(args) -> int:
    t0 = time.time()
    sc = Scenario.load_file(args.scenario)
    out = _outdir(args)
    report = run_scenario(sc)
    report.write_csv(out / "report.csv")
    report.write_summary(out / "summary.csv")
    _manifest(out, "simulate", args, sc.to_dict(), ["report.csv", "summary.csv"], t0)
    return 0


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    t0 = time.time()
    if not args.inputs:
        raise UsageError("report needs at least one input")
    out = _outdir(args)
    if args.kind == "violation":
        rows = []
        for inp in args.inputs:
            p = Path(inp)
            rows.extend(_read_csv(p / "summary.csv" if p.is_dir() else p))
        hashes = {r["base_hash"] for r in rows}
        merged = [{"lat_cap": r["lat_cap"], "policy": r["policy"], "scenario": r["scenario"],
                   "violation_rate": r["violation_rate"], "accuracy": r["accuracy"],
                   "mean_cost": r["mean_cost"], "n": r["n"], "base_hash": r["base_hash"],
                   "hash_mismatch": int(len(hashes) > 1)}
                  for r in rows]
        merged.sort(key=lambda r: (float(r["lat_cap"] or "inf"), r["policy"], r["scenario"]))
        _write_csv(out / "violation.csv", list(merged[0]) if merged else ["lat_cap"], merged)
        outputs = ["violation.csv"]
        doc = {}
    else:
        if args.config is None or not args.bounds:
            raise UsageError(f"--kind {args.kind} needs --config and --bounds")
        doc, world = _world(args)
        oracle = oracle_trie(world)
        tries = {"oracle": oracle}
        for inp in args.inputs:
            tries[Path(inp).parent.name or Path(inp).stem] = load_annotations(inp, world.template, world.catalog,
                                                                              force=args.force)
        if args.kind == "frontier":
            rows = frontier_sweep(tries, oracle, args.goal, args.bounds)
            write_rows(rows, FRONTIER_FIELDS, out / "frontier.csv")
            outputs = ["frontier.csv"]
        else:
            rows = policy_gap_report(tries, oracle, args.bounds)
            write_rows(rows, GAP_FIELDS, out / "delta.csv")
            outputs = ["delta.csv"]
    _manifest(out, "report", args, doc, outputs, t0)
    return 0


def cmd_fit_load(args) -> int:
    t0 = time.time()
    out = _outdir(args)
    rows = _read_csv(Path(args.samples))
    if not rows:
        raise UsageError("empty samples file")
    model = fit_load_model(rows, mode=args.mode)
    model.save(out / "load_model.json")
    _manifest(out, "fit-load", args, {}, ["load_model.json"], t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triectl", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=1, help="worker cap (execution is single-threaded)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="world config JSON")
            sp.add_argument("--seed", type=int, default=None, help="world seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-world", help="validate a config and summarize its oracle")
    common(sp)
    sp.set_defaults(func=cmd_gen_world)

    sp = sub.add_parser("profile", help="sparse cascade profiling plus cost ledger")
    common(sp)
    sp.add_argument("--coverage", type=float, help="fraction of checkpointed full profiling dollars")
    sp.add_argument("--runs", type=int, help="absolute number of cascade runs")
    sp.add_argument("--profile-seed", type=int, default=0)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("estimate", help="column-mean estimation from observations")
    common(sp)
    sp.add_argument("--obs", required=True)
    sp.add_argument("--method", required=True, help="/".join(METHODS))
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("plan", help="select a path for one objective")
    common(sp)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--objective", required=True, help="e.g. min_cost:acc>=0.90")
    sp.add_argument("--force", action="store_true", help="ignore template/catalog hash mismatch")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run a scenario file")
    common(sp, config=False)
    sp.add_argument("--scenario", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="merge outputs into plot-ready tables")
    sp.add_argument("--kind", required=True, choices=["violation", "frontier", "delta"])
    sp.add_argument("--inputs", nargs="*", default=[])
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--goal", default="max_acc", choices=["max_acc", "min_cost"])
    sp.add_argument("--bounds", type=float, nargs="*", default=[])
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("fit-load", help="fit per-engine slowdown curves from injection samples")
    sp.add_argument("--samples", required=True, help="CSV with engine_id, queue_depth, latency_s")
    sp.add_argument("--mode", default="slowdown", choices=["slowdown", "delay"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_load)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, AnnotationFileError, ObjectiveError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
