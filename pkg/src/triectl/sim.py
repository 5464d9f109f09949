"""End-to-end experiments: static versus replanning policies on a synthetic world."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .catalog import canonical_hash
from .controller import (RUNNING, SUCCESS, LoadModel, RequestContext, SlowdownCurve, StageResult,
                         next_action, terminate, update_after_stage)
from .estimators import annotate_estimate, estimate
from .planner import Objective, PlanResult, select_path, select_static_plan, static_candidates
from .profiler import cascade_sample
from .trie import ExecutionTrie, Prefix, load_annotations, prefix_key
from .workload import GroundTruthWorld, oracle_trie, stream, world_from_config

POLICIES = ("static", "dynamic", "dynamic_load_aware")


@dataclass
class Scenario:
    """One experiment.

    ``load`` describes background queue depth per engine as a step function of
    absolute time (``[[t_start, depth], ...]``), the ground-truth slowdown
    curve applied to realized latencies, and the request inter-arrival time.
    ``slo`` either keeps the objective's latency cap (``fixed``) or sets it to
    the predicted latency of the oracle plan for a base objective
    (``oracle_plan``), optionally scaled.
    """

    world: dict
    objective: str
    name: str = "scenario"
    world_seed: int | None = None
    annotations: str | dict = "oracle"
    requests: dict = field(default_factory=lambda: {"count": 100, "seed": 0, "replace": False})
    slo: dict = field(default_factory=lambda: {"kind": "fixed"})
    noise: dict = field(default_factory=lambda: {"kind": "none"})
    load: dict = field(default_factory=dict)
    load_model: dict | str | None = None
    policies: Sequence[str] = POLICIES
    static_kind: str = "family"  # "family" (one model per stage family) or "offline" (any trie path)
    hard_stop: bool = True
    seed: int = 0
    base_dir: str = "."

    def __post_init__(self):
        for p in self.policies:
            if p not in POLICIES:
                raise ValueError(f"unknown policy {p!r}")
        if self.static_kind not in ("family", "offline"):
            raise ValueError(f"unknown static kind {self.static_kind!r}")
        Objective.parse(self.objective)

    # -- io ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {"name": self.name, "world": self.world, "world_seed": self.world_seed,
                "annotations": self.annotations, "requests": self.requests, "objective": self.objective,
                "slo": self.slo, "noise": self.noise, "load": self.load, "load_model": self.load_model,
                "policies": list(self.policies), "static_kind": self.static_kind,
                "hard_stop": self.hard_stop, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "Scenario":
        d = dict(d)
        world = d.pop("world", None)
        if world is None and "world_config" in d:
            world = json.loads((Path(base_dir) / d.pop("world_config")).read_text())
        if world is None:
            raise ValueError("scenario needs 'world' or 'world_config'")
        d.pop("world_config", None)
        return cls(world=world, base_dir=str(base_dir), **d)

    @classmethod
    def load_file(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    @property
    def hash(self) -> str:
        return canonical_hash(self.to_dict())

    @property
    def base_hash(self) -> str:
        """Hash of everything except the SLO, objective, policy list and name,
        so reports from one SLO sweep share it."""
        d = self.to_dict()
        for k in ("slo", "objective", "policies", "name"):
            d.pop(k)
        return canonical_hash(d)

    def with_(self, **kw) -> "Scenario":
        d = self.to_dict()
        d.update(kw)
        return Scenario.from_dict(d, self.base_dir)

    # -- resolved pieces ------------------------------------------------------
    @cached_property
    def ground_truth(self) -> GroundTruthWorld:
        return world_from_config(self.world, self.world_seed)

    @cached_property
    def oracle(self) -> ExecutionTrie:
        return oracle_trie(self.ground_truth)

    @cached_property
    def trie(self) -> ExecutionTrie:
        """Annotated trie the policies plan with."""
        a = self.annotations
        w = self.ground_truth
        if a == "oracle":
            return self.oracle
        if isinstance(a, dict) and "file" in a:
            return load_annotations(Path(self.base_dir) / a["file"], w.template, w.catalog, a.get("force", False))
        if isinstance(a, dict) and "method" in a:
            obs = cascade_sample(w, coverage=a.get("coverage", 0.02), seed=a.get("seed", 0))
            return annotate_estimate(estimate(a["method"], obs), obs)
        raise ValueError(f"bad annotations source {a!r}")

    @cached_property
    def resolved_objective(self) -> Objective:
        obj = Objective.parse(self.objective)
        kind = self.slo.get("kind", "fixed")
        if kind == "fixed":
            return obj
        if kind == "oracle_plan":
            base = Objective.parse(self.slo["base"])
            plan = select_path(self.oracle, base)
            if not plan.feasible:
                raise ValueError("base objective infeasible on the oracle trie")
            return obj.with_lat_cap(plan.lat * float(self.slo.get("scale", 1.0)))
        raise ValueError(f"unknown slo kind {kind!r}")

    @cached_property
    def request_sample(self) -> np.ndarray:
        r = self.requests
        n = self.ground_truth.n
        count = int(r.get("count", n))
        replace = bool(r.get("replace", False))
        if count > n and not replace:
            raise ValueError(f"request count {count} exceeds |Q|={n}; set replace to sample with replacement")
        rng = np.random.default_rng(int(r.get("seed", 0)))
        return rng.choice(n, size=count, replace=replace)

    @cached_property
    def noise_table(self) -> np.ndarray:
        """Mean-one latency multiplier per (node, request), keyed by (seed, prefix)."""
        w = self.ground_truth
        out = np.ones((len(w.trie), w.n))
        if self.noise.get("kind", "none") == "lognormal":
            s = float(self.noise["sigma"])
            for node in w.trie.nodes[1:]:
                z = stream(self.seed, "noise", "sim:" + prefix_key(node.prefix)).standard_normal(w.n)
                out[node.index] = np.exp(s * z - 0.5 * s * s)
        return out

    @cached_property
    def true_curve(self) -> SlowdownCurve | None:
        c = self.load.get("curve")
        return SlowdownCurve.from_dict(c) if c else None

    @cached_property
    def controller_load_model(self) -> LoadModel | None:
        lm = self.load_model
        if isinstance(lm, str):
            return LoadModel.load(Path(self.base_dir) / lm)
        if isinstance(lm, dict):
            return LoadModel.from_dict(lm)
        if self.true_curve is not None:
            engines = self.ground_truth.catalog.engines
            return LoadModel({e: self.true_curve for e in engines}, "slowdown")
        return None

    def queue_depths(self, t: float) -> dict[str, float]:
        out = {}
        for e, steps in self.load.get("engines", {}).items():
            depth = 0.0
            for t0, n in steps:
                if t0 <= t:
                    depth = float(n)
                else:
                    break
            out[e] = depth
        return out

    def slowdown(self, engine: str, t: float) -> float:
        if self.true_curve is None:
            return 1.0
        return float(self.true_curve(self.queue_depths(t).get(engine, 0.0)))


@dataclass(frozen=True)
class RunRow:
    request_index: int
    request_id: int
    policy: str
    planned_path: str
    realized_path: str
    success: bool
    cost: float
    latency: float
    violated: bool
    status: str

    FIELDS = ("request_index", "request_id", "policy", "planned_path", "realized_path", "success",
              "cost", "latency", "violated", "status")

    def csv(self) -> dict:
        return {"request_index": self.request_index, "request_id": self.request_id, "policy": self.policy,
                "planned_path": self.planned_path, "realized_path": self.realized_path,
                "success": int(self.success), "cost": f"{self.cost:.6f}", "latency": f"{self.latency:.6f}",
                "violated": int(self.violated), "status": self.status}


@dataclass
class RunReport:
    scenario: str
    scenario_hash: str
    base_hash: str
    lat_cap: float | None
    rows: list[RunRow]

    def policy_rows(self, policy: str) -> list[RunRow]:
        return [r for r in self.rows if r.policy == policy]

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for p in dict.fromkeys(r.policy for r in self.rows):
            rows = self.policy_rows(p)
            out[p] = {"n": len(rows),
                      "accuracy": float(np.mean([r.success for r in rows])),
                      "mean_cost": float(np.mean([r.cost for r in rows])),
                      "mean_latency": float(np.mean([r.latency for r in rows])),
                      "violation_rate": float(np.mean([r.violated for r in rows]))}
        return out

    def violation_rate(self, policy: str) -> float:
        return self.aggregates()[policy]["violation_rate"]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(RunRow.FIELDS), lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow(r.csv())

    def write_summary(self, path: str | Path) -> None:
        fields = ["scenario", "scenario_hash", "base_hash", "policy", "lat_cap", "n", "accuracy", "mean_cost",
                  "mean_latency", "violation_rate"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for p, a in self.aggregates().items():
                w.writerow({"scenario": self.scenario, "scenario_hash": self.scenario_hash,
                            "base_hash": self.base_hash, "policy": p,
                            "lat_cap": "" if self.lat_cap is None else f"{self.lat_cap:.6f}", "n": a["n"],
                            "accuracy": f"{a['accuracy']:.6f}", "mean_cost": f"{a['mean_cost']:.6f}",
                            "mean_latency": f"{a['mean_latency']:.6f}",
                            "violation_rate": f"{a['violation_rate']:.6f}"})


class _Runner:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.w = sc.ground_truth
        self.trie = sc.trie
        self.obj = sc.resolved_objective
        self.noise = sc.noise_table
        self.engines = {m.id: m.engine for m in self.w.catalog.models}
        self.interarrival = float(sc.load.get("interarrival", 1.0))
        self._static_plan: PlanResult | None = None

    def stage(self, q: int, prefix: Prefix, t: float) -> tuple[float, float, bool]:
        i = self.w.trie.index[prefix]
        lat = self.w.stage_latency[i, q] * self.noise[i, q] * self.sc.slowdown(self.engines[prefix[-1]], t)
        return float(lat), float(self.w.stage_cost[i, q]), bool(self.w.outcome[i, q])

    def static_plan(self) -> PlanResult:
        if self._static_plan is None:
            if self.sc.static_kind == "offline":
                plan = select_path(self.trie, self.obj)
            else:
                plan = select_static_plan(self.trie, self.obj)
            if not plan.feasible:
                plan = self._fallback_static()
            self._static_plan = plan
        return self._static_plan

    def _fallback_static(self) -> PlanResult:
        """Minimum-latency static configuration (used when nothing is feasible)."""
        acc, cost, lat = self.trie.metric_arrays
        if self.sc.static_kind == "offline":
            cands = [n.prefix for n in self.trie.nodes if n.terminal_eligible and n.annotation is not None]
        else:
            cands = [p for p in static_candidates(self.trie) if not np.isnan(acc[self.trie.index[p]])]
        best = min(cands, key=lambda p: (lat[self.trie.index[p]], cost[self.trie.index[p]], p))
        i = self.trie.index[best]
        return PlanResult(self.obj, best, float(acc[i]), float(cost[i]), float(lat[i]), binding="fallback")

    def violated(self, latency: float) -> bool:
        return self.obj.lat_cap is not None and latency > self.obj.lat_cap

    def run_static(self, k: int, q: int) -> RunRow:
        plan = self.static_plan()
        t0 = k * self.interarrival
        elapsed = spent = 0.0
        realized: Prefix = ()
        success = False
        for m in plan.path:
            realized = realized + (m,)
            lat, c, ok = self.stage(q, realized, t0 + elapsed)
            elapsed += lat
            spent += c
            if ok:
                success = True
                break
        status = SUCCESS if success else "terminated_exhausted"
        return RunRow(k, q, "static", prefix_key(plan.path), prefix_key(realized), success, spent, elapsed,
                      self.violated(elapsed), status)

    def run_dynamic(self, k: int, q: int, load_aware: bool) -> RunRow:
        t0 = k * self.interarrival
        lm = self.sc.controller_load_model if load_aware else None
        ctx = RequestContext(self.obj, self.w.template.max_depth, hard_stop=self.sc.hard_stop)
        planned = None
        while ctx.status == RUNNING:
            depths = self.sc.queue_depths(t0 + ctx.elapsed) if lm is not None else None
            d = next_action(self.trie, ctx, lm, depths)
            if planned is None:
                planned = ctx.prefix + d.suffix
            if d.action == "terminate":
                ctx = terminate(ctx)
                break
            prefix = ctx.prefix + (d.model,)
            lat, c, ok = self.stage(q, prefix, t0 + ctx.elapsed)
            ctx = update_after_stage(ctx, StageResult(d.model, lat, c, ok))
        policy = "dynamic_load_aware" if load_aware else "dynamic"
        return RunRow(k, q, policy, prefix_key(planned or ()), prefix_key(ctx.prefix), ctx.status == SUCCESS,
                      ctx.spent, ctx.elapsed, self.violated(ctx.elapsed), ctx.status)


def run_scenario(scenario: Scenario, policies: Iterable[str] | None = None) -> RunReport:
    """Serve the sampled requests under each policy; rows ordered by policy, then request."""
    runner = _Runner(scenario)
    rows = []
    for policy in (policies or scenario.policies):
        for k, q in enumerate(scenario.request_sample.tolist()):
            if policy == "static":
                rows.append(runner.run_static(k, q))
            else:
                rows.append(runner.run_dynamic(k, q, policy == "dynamic_load_aware"))
    return RunReport(scenario.name, scenario.hash, scenario.base_hash, runner.obj.lat_cap, rows)


# -- offline sweeps -----------------------------------------------------------------

FRONTIER_FIELDS = ["objective", "bound", "annotations", "path", "planned_acc", "planned_cost",
                   "achieved_acc", "achieved_cost", "oracle_acc", "oracle_cost", "satisfied"]


def frontier_sweep(annotated: Mapping[str, ExecutionTrie], oracle: ExecutionTrie, goal: str,
                   bounds: Iterable[float], tol: float = 0.02) -> list[dict]:
    """Plan each bound with every annotation source and score the choice on the oracle.

    ``goal`` is ``"max_acc"`` (bounds are cost caps) or ``"min_cost"`` (bounds
    are accuracy floors).  ``satisfied`` checks the achieved true metric against
    the bound, with ``tol`` slack on accuracy floors.
    """
    rows = []
    oacc, ocost, _ = oracle.metric_arrays
    for b in bounds:
        obj = Objective(goal, acc_floor=b) if goal == "min_cost" else Objective(goal, cost_cap=b)
        ref = select_path(oracle, obj)
        for name, trie in annotated.items():
            plan = select_path(trie, obj)
            row = {"objective": goal, "bound": f"{b:.6f}", "annotations": name,
                   "path": prefix_key(plan.path) if plan.feasible else "INFEASIBLE",
                   "oracle_acc": f"{ref.acc:.6f}" if ref.feasible else "",
                   "oracle_cost": f"{ref.cost:.6f}" if ref.feasible else ""}
            if plan.feasible:
                i = oracle.index[plan.path]
                a, c = float(oacc[i]), float(ocost[i])
                ok = a >= b - tol if goal == "min_cost" else c <= b + 1e-9
                row.update(planned_acc=f"{plan.acc:.6f}", planned_cost=f"{plan.cost:.6f}",
                           achieved_acc=f"{a:.6f}", achieved_cost=f"{c:.6f}", satisfied=int(ok))
            else:
                row.update(planned_acc="", planned_cost="", achieved_acc="", achieved_cost="", satisfied=0)
            rows.append(row)
    return rows


GAP_FIELDS = ["cost_bound", "annotations", "static_path", "trie_path", "static_planned_acc",
              "trie_planned_acc", "planned_delta", "static_true_acc", "trie_true_acc", "true_delta"]


def policy_gap_report(annotated: Mapping[str, ExecutionTrie], oracle: ExecutionTrie,
                      cost_bounds: Iterable[float]) -> list[dict]:
    """Per cost cap: best static plan versus best trie path, planned and true accuracy."""
    oacc = oracle.metric_arrays[0]
    rows = []
    for b in cost_bounds:
        obj = Objective("max_acc", cost_cap=b)
        for name, trie in annotated.items():
            s = select_static_plan(trie, obj)
            t = select_path(trie, obj)
            row = {"cost_bound": f"{b:.6f}", "annotations": name,
                   "static_path": prefix_key(s.path) if s.feasible else "INFEASIBLE",
                   "trie_path": prefix_key(t.path) if t.feasible else "INFEASIBLE"}
            sp = s.acc if s.feasible else 0.0
            tp = t.acc if t.feasible else 0.0
            st = float(oacc[oracle.index[s.path]]) if s.feasible else 0.0
            tt = float(oacc[oracle.index[t.path]]) if t.feasible else 0.0
            row.update(static_planned_acc=f"{sp:.6f}", trie_planned_acc=f"{tp:.6f}",
                       planned_delta=f"{tp - sp:.6f}", static_true_acc=f"{st:.6f}",
                       trie_true_acc=f"{tt:.6f}", true_delta=f"{tt - st:.6f}")
            rows.append(row)
    return rows


def delta_area(rows: list[dict], name: str, column: str = "true_delta") -> float:
    """Trapezoid area under a delta curve for one annotation source."""
    pts = sorted((float(r["cost_bound"]), float(r[column])) for r in rows if r["annotations"] == name)
    if len(pts) < 2:
        return pts[0][1] if pts else 0.0
    x, y = np.array(pts).T
    return float(trapezoid(y, x))


def write_rows(rows: list[dict], fields: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


INJECTION_DEPTHS = (0, 1, 2, 4, 8, 16, 32)


def injection_samples(curve: SlowdownCurve, baselines: Mapping[str, float], depths: Sequence[int] = INJECTION_DEPTHS,
                      reps: int = 50, sigma: float = 0.1, seed: int = 0) -> list[dict]:
    """Synthetic load-injection measurements: ``reps`` latencies per (engine, queue depth)."""
    rng = np.random.default_rng(seed)
    rows = []
    for e in sorted(baselines):
        for n in depths:
            lat = baselines[e] * float(curve(n)) * np.exp(sigma * rng.standard_normal(reps) - 0.5 * sigma ** 2)
            rows.extend({"engine_id": e, "queue_depth": n, "latency_s": f"{x:.6f}"} for x in lat)
    return rows
