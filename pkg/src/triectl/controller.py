"""Receding-horizon control: replan on the subtrie under the realized prefix."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import isotonic_regression

from .planner import Adjustment, Objective, PlanResult, select_path, suffix_delay
from .trie import ExecutionTrie, Prefix, reroot

RUNNING = "running"
SUCCESS = "terminated_success"
BUDGET = "terminated_budget"
EXHAUSTED = "terminated_exhausted"


@dataclass(frozen=True)
class StageResult:
    model: str
    latency: float
    cost: float
    terminated: bool  # the workflow succeeded and stopped


@dataclass(frozen=True)
class RequestContext:
    objective: Objective
    max_depth: int
    prefix: Prefix = ()
    elapsed: float = 0.0
    spent: float = 0.0
    history: tuple[StageResult, ...] = ()
    status: str = RUNNING
    hard_stop: bool = True

    @property
    def remaining_latency(self) -> float:
        cap = self.objective.lat_cap
        return float("inf") if cap is None else cap - self.elapsed


# -- load model ---------------------------------------------------------------------

@dataclass(frozen=True)
class SlowdownCurve:
    """Monotone piecewise-linear map from queue depth to a latency multiplier
    (or an extra delay in seconds); flat beyond the outer knots."""

    queue_depth: tuple[float, ...]
    value: tuple[float, ...]
    residual: float = 0.0

    def __post_init__(self):
        if len(self.queue_depth) != len(self.value) or not self.queue_depth:
            raise ValueError("knot lists must be nonempty and of equal length")
        if any(b <= a for a, b in zip(self.queue_depth, self.queue_depth[1:])):
            raise ValueError("queue depths must be strictly increasing")
        if any(b < a for a, b in zip(self.value, self.value[1:])):
            raise ValueError("curve values must be nondecreasing")

    def __call__(self, n):
        return np.interp(n, self.queue_depth, self.value)

    def to_dict(self) -> dict:
        return {"queue_depth": list(self.queue_depth), "value": list(self.value), "residual": self.residual}

    @classmethod
    def from_dict(cls, d: dict) -> "SlowdownCurve":
        return cls(tuple(float(x) for x in d["queue_depth"]), tuple(float(x) for x in d["value"]),
                   float(d.get("residual", 0.0)))


@dataclass(frozen=True)
class LoadModel:
    """Per-engine curves.  ``mode="delay"`` reads curves as extra seconds per
    stage; ``mode="slowdown"`` reads them as multipliers on the stage's
    predicted latency, so the extra delay is ``(s - 1) * latency``."""

    curves: Mapping[str, SlowdownCurve]
    mode: str = "delay"

    def __post_init__(self):
        if self.mode not in ("delay", "slowdown"):
            raise ValueError(f"unknown load mode {self.mode!r}")

    def extra_delay(self, engine: str, queue_depth: float, stage_latency: float) -> float:
        curve = self.curves.get(engine)
        if curve is None:
            return 0.0
        v = float(curve(queue_depth))
        return max(0.0, v if self.mode == "delay" else (v - 1.0) * stage_latency)

    def edge_delays(self, trie: ExecutionTrie, queue_depths: Mapping[str, float]) -> np.ndarray:
        """Extra delay for every trie edge (indexed by child node) at the given queue depths."""
        lat = trie.metric_arrays[2]
        parent = trie.parent
        engines = [m.engine for m in trie.catalog.models]
        stage = np.zeros(len(trie))
        stage[1:] = lat[1:] - np.where(parent[1:] > 0, lat[np.maximum(parent[1:], 0)], 0.0)
        stage = np.nan_to_num(stage)
        per_model_delay = np.zeros(len(engines))
        per_model_mult = np.zeros(len(engines))
        for k, e in enumerate(engines):
            curve = self.curves.get(e)
            if curve is None:
                continue
            v = float(curve(queue_depths.get(e, 0.0)))
            if self.mode == "delay":
                per_model_delay[k] = max(0.0, v)
            else:
                per_model_mult[k] = max(0.0, v - 1.0)
        midx = trie.model_idx
        out = np.zeros(len(trie))
        out[1:] = per_model_delay[midx[1:]] + per_model_mult[midx[1:]] * np.maximum(stage[1:], 0.0)
        return out

    def to_dict(self) -> dict:
        return {"mode": self.mode, "engines": {e: c.to_dict() for e, c in sorted(self.curves.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "LoadModel":
        return cls({e: SlowdownCurve.from_dict(c) for e, c in d["engines"].items()}, d.get("mode", "delay"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LoadModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_slowdown_curve(samples: Iterable[tuple[float, float]], baseline: float) -> SlowdownCurve:
    """Median slowdown per queue depth, made monotone by pool-adjacent-violators."""
    if not baseline > 0:
        raise ValueError("baseline latency must be > 0")
    by_depth: dict[float, list[float]] = {}
    for n, lat in samples:
        by_depth.setdefault(float(n), []).append(float(lat))
    if len(by_depth) < 2:
        raise ValueError("need samples at two or more distinct queue depths")
    depths = sorted(by_depth)
    med = np.array([np.median(by_depth[d]) / baseline for d in depths])
    fit = isotonic_regression(med).x
    resid = float(np.sqrt(np.mean((fit - med) ** 2)))
    return SlowdownCurve(tuple(depths), tuple(float(v) for v in fit), resid)


def fit_load_model(rows: Iterable[Mapping], baselines: Mapping[str, float] | None = None,
                   mode: str = "slowdown") -> LoadModel:
    """Fit one curve per engine from {engine_id, queue_depth, latency_s} rows.

    Without an explicit baseline, an engine's baseline is its median latency at
    the smallest sampled queue depth.
    """
    per_engine: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        per_engine.setdefault(str(r["engine_id"]), []).append((float(r["queue_depth"]), float(r["latency_s"])))
    curves = {}
    for e, samples in sorted(per_engine.items()):
        if baselines and e in baselines:
            base = baselines[e]
        else:
            n0 = min(n for n, _ in samples)
            base = float(np.median([lat for n, lat in samples if n == n0]))
        curve = fit_slowdown_curve(samples, base)
        if mode == "delay":
            curve = SlowdownCurve(curve.queue_depth, tuple(base * (v - 1.0) for v in curve.value), curve.residual)
        curves[e] = curve
    return LoadModel(curves, mode)


# -- decisions --------------------------------------------------------------------

@dataclass(frozen=True)
class Decision:
    action: str  # "invoke" | "terminate"
    model: str | None
    suffix: Prefix  # planned remaining models
    delta_acc: float
    delta_cost: float
    delta_lat: float  # includes load inflation
    fallback: bool = False
    plan: PlanResult | None = field(default=None, compare=False)


def _node_metrics(trie: ExecutionTrie, prefix: Prefix) -> tuple[float, float, float]:
    if not prefix:
        return 0.0, 0.0, 0.0
    a = trie.node(prefix).annotation
    if a is None:
        raise ValueError(f"current node {'/'.join(prefix)!r} has no annotation")
    return a.acc, a.cost, a.lat


def next_action(trie: ExecutionTrie, ctx: RequestContext, load_model: LoadModel | None = None,
                queue_depths: Mapping[str, float] | None = None) -> Decision:
    """Plan on the subtrie under the realized prefix with updated budgets.

    Latency feasibility is ``elapsed + (T(v) - T(u)) + load delay <= cap`` and
    cost feasibility is ``spent + (C(v) - C(u)) <= cap``.  When nothing is
    feasible the request stops if it may stop here, else it follows the
    suffix with the smallest predicted extra latency.
    """
    if ctx.status != RUNNING:
        raise ValueError(f"request already {ctx.status}")
    view = reroot(trie, ctx.prefix)
    acc_u, cost_u, lat_u = _node_metrics(trie, ctx.prefix)
    edge = load_model.edge_delays(trie, queue_depths or {}) if load_model is not None else None
    adjust = Adjustment(cost_offset=ctx.spent - cost_u, lat_offset=ctx.elapsed - lat_u, edge_delay=edge)
    plan = select_path(view, ctx.objective, adjust)
    fallback = False
    target = plan.path
    if target is None:
        fallback = True
        if view.root.terminal_eligible:
            target = ctx.prefix
        else:
            target = _min_latency_suffix(view, adjust)
    if target == ctx.prefix:
        return Decision("terminate", None, (), 0.0, 0.0, 0.0, fallback, plan)
    suffix = target[len(ctx.prefix):]
    i = trie.index[target]
    a, c, t = (float(x[i]) for x in trie.metric_arrays)
    live = plan.eff_lat - ctx.elapsed if not fallback else _live_lat(view, adjust, i) - ctx.elapsed
    return Decision("invoke", suffix[0], suffix, a - acc_u, c - cost_u, live, fallback, plan)


def _live_lat(view, adjust: Adjustment, i: int) -> float:
    lat = view.trie.metric_arrays[2]
    delay = suffix_delay(view, adjust.edge_delay)
    return float(lat[i] + adjust.lat_offset + delay[i - view.lo])


def _min_latency_suffix(view, adjust: Adjustment) -> Prefix:
    tr = view.trie
    acc, cost, lat = tr.metric_arrays
    sl = slice(view.lo, view.hi)
    elat = lat[sl] + adjust.lat_offset + suffix_delay(view, adjust.edge_delay)
    ok = tr.terminal[sl] & ~np.isnan(acc[sl])
    ok[0] = False
    if not ok.any():
        # nothing annotated below: take the first child
        first = next(iter(view.root.children.values()))
        return first.prefix
    idx = np.nonzero(ok)[0]
    order = np.lexsort((idx, cost[sl][idx], elat[idx]))
    return tr._prefixes[view.lo + idx[order[0]]]


def update_after_stage(ctx: RequestContext, result: StageResult) -> RequestContext:
    if ctx.status != RUNNING:
        raise ValueError(f"cannot update a request that is {ctx.status}")
    if result.latency < 0 or result.cost < 0:
        raise ValueError("stage latency and cost must be nonnegative")
    prefix = ctx.prefix + (result.model,)
    elapsed = ctx.elapsed + result.latency
    status = RUNNING
    if result.terminated:
        status = SUCCESS
    elif ctx.hard_stop and ctx.objective.lat_cap is not None and elapsed > ctx.objective.lat_cap:
        status = BUDGET
    elif len(prefix) >= ctx.max_depth:
        status = EXHAUSTED
    return replace(ctx, prefix=prefix, elapsed=elapsed, spent=ctx.spent + result.cost,
                   history=ctx.history + (result,), status=status)


def terminate(ctx: RequestContext) -> RequestContext:
    """Stop a running request on the controller's own decision."""
    if ctx.status != RUNNING:
        raise ValueError(f"request already {ctx.status}")
    return replace(ctx, status=EXHAUSTED)


@dataclass(frozen=True)
class OverheadStats:
    mean: float
    p50: float
    p99: float
    repetitions: int


def replanning_overhead_probe(trie: ExecutionTrie, objective: Objective, repetitions: int = 200,
                              load_model: LoadModel | None = None) -> OverheadStats:
    """Wall time (seconds) of ``next_action`` at the root."""
    ctx = RequestContext(objective, trie.template.max_depth)
    next_action(trie, ctx, load_model)  # warm caches
    times = np.empty(repetitions)
    for r in range(repetitions):
        t0 = time.perf_counter()
        next_action(trie, ctx, load_model)
        times[r] = time.perf_counter() - t0
    return OverheadStats(float(times.mean()), float(np.percentile(times, 50)),
                         float(np.percentile(times, 99)), repetitions)
