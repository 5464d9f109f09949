"""Constrained path selection over an annotated (sub)trie."""
from __future__ import annotations

import itertools
import re
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trie import ExecutionTrie, Prefix, TrieView, as_view, prefix_key

GRAMMAR = ("objective := goal ':' constraint (',' constraint)* ; goal := min_cost | max_acc ; "
           "constraint := acc>=A | cost<=C | lat<=L   e.g. 'min_cost:acc>=0.90', 'max_acc:lat<=4.9'")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class Objective:
    """Minimize cost under an accuracy floor, or maximize accuracy under caps.

    The single-constraint forms are the three standard kinds; extra caps
    (e.g. a latency cap on a cost-capped objective) make a joint objective.
    """

    goal: str  # "min_cost" | "max_acc"
    acc_floor: float | None = None
    cost_cap: float | None = None
    lat_cap: float | None = None

    def __post_init__(self):
        if self.goal not in ("min_cost", "max_acc"):
            raise ObjectiveError(f"unknown goal {self.goal!r}")
        for name in ("acc_floor", "cost_cap", "lat_cap"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v >= 0):
                raise ObjectiveError(f"{name} must be finite and nonnegative")
        if self.goal == "min_cost" and self.acc_floor is None:
            raise ObjectiveError("min_cost needs an accuracy floor")
        if self.goal == "max_acc" and self.cost_cap is None and self.lat_cap is None:
            raise ObjectiveError("max_acc needs a cost or latency cap")

    @property
    def kind(self) -> str:
        if self.goal == "min_cost":
            return "min_cost_acc_floor"
        return "max_acc_cost_cap" if self.cost_cap is not None else "max_acc_lat_cap"

    @property
    def joint(self) -> bool:
        return sum(v is not None for v in (self.acc_floor, self.cost_cap, self.lat_cap)) > 1

    def with_lat_cap(self, lat_cap: float | None) -> "Objective":
        return Objective(self.goal, self.acc_floor, self.cost_cap, lat_cap)

    def __str__(self) -> str:
        parts = []
        if self.acc_floor is not None:
            parts.append(f"acc>={self.acc_floor:g}")
        if self.cost_cap is not None:
            parts.append(f"cost<={self.cost_cap:g}")
        if self.lat_cap is not None:
            parts.append(f"lat<={self.lat_cap:g}")
        return f"{self.goal}:{','.join(parts)}"

    @classmethod
    def parse(cls, text: str) -> "Objective":
        m = re.fullmatch(r"\s*(min_cost|max_acc)\s*:\s*(.+?)\s*", text)
        if not m:
            raise ObjectiveError(f"cannot parse objective {text!r}; {GRAMMAR}")
        kw = {}
        for part in m.group(2).split(","):
            c = re.fullmatch(r"\s*(acc|cost|lat)\s*(>=|<=)\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*", part)
            if not c:
                raise ObjectiveError(f"bad constraint {part!r}; {GRAMMAR}")
            metric, op, val = c.group(1), c.group(2), float(c.group(3))
            if (metric == "acc") != (op == ">="):
                raise ObjectiveError(f"constraint {part!r} has the wrong direction; {GRAMMAR}")
            name = {"acc": "acc_floor", "cost": "cost_cap", "lat": "lat_cap"}[metric]
            if name in kw:
                raise ObjectiveError(f"duplicate {metric} constraint; {GRAMMAR}")
            kw[name] = val
        try:
            return cls(m.group(1), **kw)
        except ObjectiveError as exc:
            raise ObjectiveError(f"{exc}; {GRAMMAR}") from None


@dataclass(frozen=True)
class Adjustment:
    """Runtime shifts applied before feasibility checks.

    Effective cost of node v is ``cost(v) + cost_offset``; effective latency is
    ``lat(v) + lat_offset + delay(v)``, where ``delay(v)`` sums ``edge_delay``
    (indexed by trie node, all >= 0) over the edges between the view root and v.
    """

    cost_offset: float = 0.0
    lat_offset: float = 0.0
    edge_delay: np.ndarray | None = None


NO_ADJUSTMENT = Adjustment()


@dataclass
class PlanResult:
    objective: Objective
    path: Prefix | None
    acc: float = float("nan")
    cost: float = float("nan")
    lat: float = float("nan")
    eff_cost: float = float("nan")
    eff_lat: float = float("nan")
    nodes_expanded: int = 0
    nodes_pruned: int = 0
    skipped_unannotated: int = 0
    binding: str = ""
    wall_time: float = 0.0
    n_candidates: int = 0

    @property
    def feasible(self) -> bool:
        return self.path is not None

    def value(self):
        """Objective value (cost to minimize or accuracy to maximize)."""
        if not self.feasible:
            return None
        return self.cost if self.objective.goal == "min_cost" else self.acc

    CSV_FIELDS = ["objective", "path", "feasible", "acc", "cost", "lat", "nodes_expanded",
                  "nodes_pruned", "binding"]

    def csv_row(self) -> dict:
        return {
            "objective": str(self.objective),
            "path": prefix_key(self.path) if self.feasible else "INFEASIBLE",
            "feasible": int(self.feasible),
            "acc": f"{self.acc:.6f}", "cost": f"{self.cost:.6f}", "lat": f"{self.lat:.6f}",
            "nodes_expanded": self.nodes_expanded, "nodes_pruned": self.nodes_pruned,
            "binding": self.binding,
        }


def suffix_delay(view: TrieView, edge_delay: np.ndarray | None) -> np.ndarray:
    """Accumulated edge delay from the view root to each node of the view."""
    n = len(view)
    delay = np.zeros(n)
    if edge_delay is None:
        return delay
    trie = view.trie
    lo = view.lo
    depth = trie.depth[lo:view.hi]
    parent = trie.parent[lo:view.hi] - lo
    edge = np.asarray(edge_delay, dtype=float)[lo:view.hi]
    for d in range(int(depth[0]) + 1, int(depth.max()) + 1):
        sel = np.nonzero(depth == d)[0]
        delay[sel] = delay[parent[sel]] + edge[sel]
    return delay


def _binding(objective: Objective, accs, costs, lats) -> str:
    """Which constraint makes an objective infeasible over annotated candidates."""
    if not accs:
        return "no_annotated_candidates"
    checks = [("acc", objective.acc_floor, lambda i: accs[i] >= objective.acc_floor),
              ("cost", objective.cost_cap, lambda i: costs[i] <= objective.cost_cap),
              ("lat", objective.lat_cap, lambda i: lats[i] <= objective.lat_cap)]
    idx = range(len(accs))
    alone = [name for name, bound, ok in checks if bound is not None and not any(ok(i) for i in idx)]
    return "+".join(alone) if alone else "joint"


def select_path(trie: ExecutionTrie | TrieView, objective: Objective,
                adjust: Adjustment = NO_ADJUSTMENT) -> PlanResult:
    """Optimal terminal-eligible node of the view by pruned preorder search.

    Nodes are visited in preorder over a flat array, and a whole subtree is
    skipped when its precomputed bounds show it cannot hold a feasible node
    that beats the incumbent.  Ties go to lower cost, then lower latency, then
    the lexicographically smallest path.
    """
    t0 = time.perf_counter()
    view = as_view(trie)
    tr = view.trie
    lo, hi = view.lo, view.hi
    acc_a, cost_a, lat_a = tr.metric_arrays
    cmin_a, lmin_a, amax_a = tr.candidate_bounds
    delay_a = suffix_delay(view, adjust.edge_delay)
    co, lo_off = adjust.cost_offset, adjust.lat_offset
    sl = slice(lo, hi)
    acc = acc_a[sl].tolist()
    cost = cost_a[sl].tolist()
    lat = lat_a[sl].tolist()
    ecost = (cost_a[sl] + co).tolist()
    elat = (lat_a[sl] + lo_off + delay_a).tolist()
    cbound = (cmin_a[sl] + co).tolist()
    lbound = (lmin_a[sl] + lo_off + delay_a).tolist()
    abound = amax_a[sl].tolist()
    size = tr.size[sl].tolist()
    cand = tr.terminal[sl].tolist()
    floor, ccap, lcap = objective.acc_floor, objective.cost_cap, objective.lat_cap
    min_cost = objective.goal == "min_cost"

    best, best_key = None, None
    expanded = pruned = 0
    skipped = int((tr.terminal[sl] & np.isnan(acc_a[sl])).sum())
    n = hi - lo
    i = 0
    while i < n:
        # budget / floor infeasibility of the whole subtree
        dead = ((floor is not None and abound[i] < floor)
                or (ccap is not None and cbound[i] > ccap)
                or (lcap is not None and lbound[i] > lcap)
                or abound[i] == -np.inf)
        if not dead and min_cost and best_key is not None:
            # incumbent bound: (min cost, min latency, first index) is a lexicographic lower bound
            dead = (cbound[i], lbound[i], i) > best_key
        if dead:
            pruned += size[i]
            i += size[i]
            continue
        expanded += 1
        if cand[i]:
            a = acc[i]
            ok = (a == a and (floor is None or a >= floor) and (ccap is None or ecost[i] <= ccap)
                  and (lcap is None or elat[i] <= lcap))
            if ok:
                key = (ecost[i], elat[i], i) if min_cost else (-a, ecost[i], elat[i], i)
                if best_key is None or key < best_key:
                    best, best_key = i, key
        i += 1

    kw = dict(nodes_expanded=expanded, nodes_pruned=pruned, skipped_unannotated=skipped)
    if best is None:
        mask = np.asarray(cand) & ~np.isnan(acc_a[sl])
        kw["binding"] = _binding(objective, acc_a[sl][mask].tolist(), np.asarray(ecost)[mask].tolist(),
                                 np.asarray(elat)[mask].tolist())
    if best is None:
        res = PlanResult(objective, None, **kw)
    else:
        res = PlanResult(objective, tr._prefixes[best + lo], acc[best], cost[best], lat[best],
                         ecost[best], elat[best], **kw)
    res.wall_time = time.perf_counter() - t0
    return res


def select_path_exhaustive(trie: ExecutionTrie | TrieView, objective: Objective,
                           adjust: Adjustment = NO_ADJUSTMENT) -> PlanResult:
    """Reference implementation: score every terminal-eligible node of the view."""
    t0 = time.perf_counter()
    view = as_view(trie)
    root_depth = len(view.prefix)
    edge = adjust.edge_delay
    best, best_key = None, None
    accs, costs, lats = [], [], []
    n_cand = 0
    for node in view:
        if not node.terminal_eligible or node.annotation is None:
            continue
        n_cand += 1
        a = node.annotation
        delay = 0.0
        if edge is not None:
            for d in range(root_depth + 1, node.depth + 1):
                delay = delay + float(edge[view.trie.index[node.prefix[:d]]])
        ec = a.cost + adjust.cost_offset
        el = a.lat + adjust.lat_offset + delay
        accs.append(a.acc)
        costs.append(ec)
        lats.append(el)
        ok = ((objective.acc_floor is None or a.acc >= objective.acc_floor)
              and (objective.cost_cap is None or ec <= objective.cost_cap)
              and (objective.lat_cap is None or el <= objective.lat_cap))
        if not ok:
            continue
        key = (ec, el, node.prefix) if objective.goal == "min_cost" else (-a.acc, ec, el, node.prefix)
        if best_key is None or key < best_key:
            best, best_key = (node, ec, el), key
    if best is None:
        res = PlanResult(objective, None, binding=_binding(objective, accs, costs, lats),
                         nodes_expanded=len(view), n_candidates=n_cand)
    else:
        node, ec, el = best
        a = node.annotation
        res = PlanResult(objective, node.prefix, a.acc, a.cost, a.lat, ec, el,
                         nodes_expanded=len(view), n_candidates=n_cand)
    res.wall_time = time.perf_counter() - t0
    return res


# -- static (one model per stage family) plans -------------------------------------

def static_candidates(trie: ExecutionTrie | TrieView, family_binding: Sequence[str] | None = None) -> list[Prefix]:
    """Paths that bind one model per stage family, for every stopping depth.

    ``family_binding[d-1]`` names the family invoked at depth d; all depths that
    share a family reuse the same model.
    """
    view = as_view(trie)
    tr = view.trie
    tmpl = tr.template
    binding = list(family_binding) if family_binding is not None else tmpl.family_binding()
    if len(binding) < tmpl.max_depth:
        raise ValueError("family binding must name a family for every depth")
    out = []
    for h in sorted(tmpl.terminal_depths):
        fams = list(dict.fromkeys(binding[:h]))
        choices = []
        for f in fams:
            depths = [d for d in range(1, h + 1) if binding[d - 1] == f]
            allowed = set(tmpl.admissible(depths[0]))
            for d in depths[1:]:
                allowed &= set(tmpl.admissible(d))
            choices.append(sorted(allowed))
        for combo in itertools.product(*choices):
            pick = dict(zip(fams, combo))
            path = tuple(pick[binding[d - 1]] for d in range(1, h + 1))
            if path in view:
                out.append(path)
    return sorted(out)


def select_static_plan(trie: ExecutionTrie | TrieView, objective: Objective,
                       family_binding: Sequence[str] | None = None,
                       adjust: Adjustment = NO_ADJUSTMENT) -> PlanResult:
    """Best plan among static configurations, same constraints and tie-breaks."""
    t0 = time.perf_counter()
    view = as_view(trie)
    tr = view.trie
    cands = static_candidates(view, family_binding)
    acc_a, cost_a, lat_a = tr.metric_arrays
    delay = suffix_delay(view, adjust.edge_delay)
    best, best_key = None, None
    accs, costs, lats = [], [], []
    for p in cands:
        i = tr.index[p]
        a = acc_a[i]
        if np.isnan(a):
            continue
        ec = cost_a[i] + adjust.cost_offset
        el = lat_a[i] + adjust.lat_offset + delay[i - view.lo]
        accs.append(a)
        costs.append(ec)
        lats.append(el)
        ok = ((objective.acc_floor is None or a >= objective.acc_floor)
              and (objective.cost_cap is None or ec <= objective.cost_cap)
              and (objective.lat_cap is None or el <= objective.lat_cap))
        if not ok:
            continue
        key = (ec, el, i) if objective.goal == "min_cost" else (-a, ec, el, i)
        if best_key is None or key < best_key:
            best, best_key = (i, ec, el), key
    if best is None:
        res = PlanResult(objective, None, binding=_binding(objective, accs, costs, lats),
                         nodes_expanded=len(cands), n_candidates=len(cands))
    else:
        i, ec, el = best
        res = PlanResult(objective, tr._prefixes[i], float(acc_a[i]), float(cost_a[i]), float(lat_a[i]),
                         float(ec), float(el), nodes_expanded=len(cands), n_candidates=len(cands))
    res.wall_time = time.perf_counter() - t0
    return res
