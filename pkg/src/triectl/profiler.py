"""Sparse cascade profiling, subtree fill-in and profiling-cost accounting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .trie import ExecutionTrie, Prefix, parse_prefix, prefix_key
from .workload import GroundTruthWorld

MISSING, DIRECT, FILLED = 0, 1, 2


@dataclass(frozen=True)
class Entry:
    outcome: int
    cost: float
    latency: float


@dataclass
class ObservationSet:
    """Cascade observations, one per distinct (request, node), in first-visit order.

    A later run that revisits a (request, node) pair resumes from its
    checkpoint: no new invocation, no new entry.
    """

    trie: ExecutionTrie
    n_requests: int
    node: np.ndarray
    request: np.ndarray
    outcome: np.ndarray
    cost: np.ndarray
    latency: np.ndarray
    runs: int = 0
    seed: int | None = None
    budget: float | None = None

    def __len__(self) -> int:
        return len(self.node)

    @property
    def invocations(self) -> int:
        return len(self.node)

    @property
    def spent(self) -> float:
        return math.fsum(self.cost)

    @property
    def entries(self) -> dict[tuple[int, Prefix], Entry]:
        prefixes = self.trie._prefixes
        return {(int(q), prefixes[i]): Entry(int(o), float(c), float(t))
                for i, q, o, c, t in zip(self.node, self.request, self.outcome, self.cost, self.latency)}

    def column_counts(self) -> np.ndarray:
        return np.bincount(self.node, minlength=len(self.trie))

    def save(self, path: str | Path) -> None:
        prefixes = self.trie._prefixes
        with open(path, "w") as fh:
            for i, q, o, c, t in zip(self.node, self.request, self.outcome, self.cost, self.latency):
                fh.write(json.dumps({"request_id": int(q), "prefix": prefix_key(prefixes[i]),
                                     "outcome": int(o), "cost": float(c), "latency": float(t)}) + "\n")

    @classmethod
    def load(cls, path: str | Path, trie: ExecutionTrie, n_requests: int) -> "ObservationSet":
        idx = trie.index
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                prefix = parse_prefix(rec["prefix"])
                if prefix not in idx or not prefix:
                    raise ValueError(f"line {lineno}: prefix {rec['prefix']!r} not in trie")
                if not 0 <= rec["request_id"] < n_requests:
                    raise ValueError(f"line {lineno}: request_id out of range")
                rows.append((idx[prefix], rec["request_id"], rec["outcome"], rec["cost"], rec["latency"]))
        arr = list(zip(*rows)) if rows else [[], [], [], [], []]
        return cls(trie, n_requests, np.array(arr[0], dtype=np.int64), np.array(arr[1], dtype=np.int64),
                   np.array(arr[2], dtype=np.int8), np.array(arr[3], dtype=float), np.array(arr[4], dtype=float))

    @classmethod
    def from_world_exhaustive(cls, world: GroundTruthWorld) -> "ObservationSet":
        """Every cascade-reachable (request, node) pair: the fully observed limit."""
        parent = world.trie.parent
        reach = np.ones(world.outcome.shape, dtype=bool)
        reach[1:] = ~world.success[parent[1:]]
        reach[0] = False
        node, req = np.nonzero(reach)
        return cls(world.trie, world.n, node, req, world.outcome[node, req].astype(np.int8),
                   world.stage_cost[node, req], world.stage_latency[node, req])


def cascade_sample(world: GroundTruthWorld, trie: ExecutionTrie | None = None, *,
                   coverage: float | None = None, runs: int | None = None, seed: int = 0,
                   chunk: int = 4096, stall_chunks: int = 4) -> ObservationSet:
    """Profile in cascade order until the budget is spent.

    Each run draws a request uniformly, then a uniform admissible model per
    depth, descending only while the current stage fails.  ``coverage`` is a
    fraction of checkpointed-full profiling dollars; ``runs`` is an absolute
    run budget.  A coverage budget stops before the invocation that would
    overspend it.  When ``stall_chunks`` consecutive chunks add nothing, the
    remaining reachable cells are visited in node order by targeted runs
    while the budget lasts.
    """
    trie = trie if trie is not None else world.trie
    if (coverage is None) == (runs is None):
        raise ValueError("give exactly one of coverage or runs")
    if coverage is not None and not 0 < coverage:
        raise ValueError("coverage must be > 0")
    if runs is not None and runs <= 0:
        raise ValueError("run budget must be > 0")
    budget = coverage * checkpoint_cost_accounting(world, "checkpointed_full").dollars if coverage else None

    rng = np.random.default_rng(seed)
    n, D = world.n, trie.template.max_depth
    ids = {m: k for k, m in enumerate(trie.catalog.ids)}
    admissible = [np.array([ids[m] for m in sorted(trie.template.admissible(d))]) for d in range(1, D + 1)]
    child_table = trie.child_table
    seen = np.zeros((len(trie), n), dtype=bool)
    out_node, out_req = [], []
    spent, done_runs, stalled = 0.0, 0, 0

    while True:
        size = chunk if runs is None else min(chunk, runs - done_runs)
        if size <= 0:
            break
        q = rng.integers(n, size=size)
        picks = [adm[rng.integers(len(adm), size=size)] for adm in admissible]
        cur = np.zeros(size, dtype=np.int64)
        alive = np.ones(size, dtype=bool)
        v_run, v_depth, v_node = [], [], []
        for d in range(D):
            r = np.nonzero(alive)[0]
            if len(r) == 0:
                break
            nxt = child_table[cur[r], picks[d][r]]
            cur[r] = nxt
            v_run.append(r)
            v_depth.append(np.full(len(r), d))
            v_node.append(nxt)
            alive[r] = ~world.outcome[nxt, q[r]]
        v_run = np.concatenate(v_run)
        order = np.lexsort((np.concatenate(v_depth), v_run))
        v_run, v_node = v_run[order], np.concatenate(v_node)[order]
        v_req = q[v_run]
        keys = v_node * n + v_req
        _, first = np.unique(keys, return_index=True)
        is_first = np.zeros(len(keys), dtype=bool)
        is_first[first] = True
        new = is_first & ~seen[v_node, v_req]
        cost = np.where(new, world.stage_cost[v_node, v_req], 0.0)
        stop = len(keys)
        exhausted = False
        if budget is not None:
            over = np.nonzero(spent + np.cumsum(cost) > budget)[0]
            if len(over):
                stop, exhausted = int(over[0]), True
        keep = np.nonzero(new[:stop])[0]
        seen[v_node[keep], v_req[keep]] = True
        out_node.append(v_node[keep])
        out_req.append(v_req[keep])
        spent += float(cost[:stop].sum())
        done_runs += int(len(np.unique(v_run[:stop]))) if exhausted else size
        if exhausted:
            break
        stalled = stalled + 1 if len(keep) == 0 else 0
        if stalled >= stall_chunks:
            if budget is not None:
                # random runs have stopped finding new cells; reach the stragglers with
                # targeted runs, each resuming at its parent's checkpoint
                reach = _reached(world)
                node, req = np.nonzero(reach & ~seen)
                cost = world.stage_cost[node, req]
                take = np.nonzero(spent + np.cumsum(cost) <= budget)[0]
                out_node.append(node[take])
                out_req.append(req[take])
                spent += float(cost[take].sum())
                done_runs += len(take)
            break

    node = np.concatenate(out_node) if out_node else np.zeros(0, dtype=np.int64)
    req = np.concatenate(out_req) if out_req else np.zeros(0, dtype=np.int64)
    return ObservationSet(trie, n, node, req, world.outcome[node, req].astype(np.int8),
                          world.stage_cost[node, req], world.stage_latency[node, req],
                          runs=done_runs, seed=seed, budget=budget)


@dataclass
class FilledTable:
    """Request-by-node accuracy table: -1 missing, else A(q, p) in {0, 1}."""

    trie: ExecutionTrie
    values: np.ndarray  # int8, shape (n_nodes, n_requests)
    provenance: np.ndarray  # MISSING / DIRECT / FILLED

    @property
    def mask(self) -> np.ndarray:
        return self.values >= 0

    def column(self, prefix: Iterable[str]) -> np.ndarray:
        return self.values[self.trie.index[tuple(prefix)]]


def subtree_fill_in(obs: ObservationSet, trie: ExecutionTrie | None = None) -> FilledTable:
    """Direct entries give A(q, u) (every ancestor failed); an observed success
    marks the whole subtree of u successful for that request."""
    trie = trie if trie is not None else obs.trie
    values = np.full((len(trie), obs.n_requests), -1, dtype=np.int8)
    prov = np.zeros(values.shape, dtype=np.int8)
    size = trie.size
    for i, q in zip(obs.node[obs.outcome == 1], obs.request[obs.outcome == 1]):
        values[i + 1:i + size[i], q] = 1
        prov[i + 1:i + size[i], q] = FILLED
    values[obs.node, obs.request] = obs.outcome
    prov[obs.node, obs.request] = DIRECT
    return FilledTable(trie, values, prov)


@dataclass(frozen=True)
class LedgerEntry:
    regime: str
    invocations: int
    dollars: float


@dataclass
class CostLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def __getitem__(self, regime: str) -> LedgerEntry:
        for e in self.entries:
            if e.regime == regime:
                return e
        raise KeyError(regime)

    def rows(self) -> list[dict]:
        """Table-2 shaped rows; ratio is naive-full dollars over the regime's dollars."""
        try:
            base = self["naive_full"].dollars
        except KeyError:
            base = None
        out = []
        for e in self.entries:
            ratio = base / e.dollars if base is not None and e.dollars > 0 else float("nan")
            out.append({"regime": e.regime, "invocations": e.invocations,
                        "dollars": f"{e.dollars:.6f}", "ratio": f"{ratio:.4f}"})
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["regime", "invocations", "dollars", "ratio"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())


def _reached(world: GroundTruthWorld) -> np.ndarray:
    reach = np.ones(world.outcome.shape, dtype=bool)
    reach[1:] = ~world.success[world.trie.parent[1:]]
    reach[0] = False
    return reach


def checkpoint_cost_accounting(world: GroundTruthWorld, regime: str, obs: ObservationSet | None = None,
                               request_ids: Iterable[int] | None = None, truncated: bool = False) -> LedgerEntry:
    """Invocations and dollars to profile ``request_ids`` under one regime.

    naive_full replays every terminating path from the root; checkpointed_full
    runs each (request, node) once and reuses the prefix state.  By default both
    run every stage (exhaustive tables); ``truncated=True`` instead stops each
    request at its first success.  sparse reports what ``obs`` actually spent.
    """
    trie = world.trie
    if regime == "sparse":
        if obs is None:
            raise ValueError("sparse regime needs an ObservationSet")
        return LedgerEntry("sparse", obs.invocations, obs.spent)
    cols = np.arange(world.n) if request_ids is None else np.asarray(list(request_ids), dtype=np.int64)
    cost = world.stage_cost[:, cols]
    counted = np.ones(cost.shape, dtype=bool)
    if truncated:
        counted = _reached(world)[:, cols]
    counted[0] = False
    if regime == "checkpointed_full":
        mult = np.ones(len(trie), dtype=np.int64)
    elif regime == "naive_full":
        # each node is re-executed once per terminating path through it
        mult = trie.terminal.astype(np.int64)
        parent = trie.parent
        for i in range(len(trie) - 1, 0, -1):
            mult[parent[i]] += mult[i]
    else:
        raise ValueError(f"unknown regime {regime!r}")
    inv = int((counted.sum(axis=1) * mult).sum())
    # correctly rounded, so equal cell sets give equal totals whatever the order
    dollars = math.fsum((cost * counted * mult[:, None]).ravel())
    return LedgerEntry(regime, inv, dollars)


def cost_ledger(world: GroundTruthWorld, obs: ObservationSet | None = None, truncated: bool = False) -> CostLedger:
    entries = []
    if obs is not None:
        entries.append(checkpoint_cost_accounting(world, "sparse", obs))
    entries.append(checkpoint_cost_accounting(world, "checkpointed_full", truncated=truncated))
    entries.append(checkpoint_cost_accounting(world, "naive_full", truncated=truncated))
    return CostLedger(entries)


@dataclass
class CoverageStats:
    cell_fraction: dict[int, float]  # observed (request, column) cells per depth
    column_fraction: dict[int, float]  # columns with >= 1 entry per depth
    column_counts: np.ndarray  # entries per node

    def histogram(self, trie: ExecutionTrie, depth: int, bins: Iterable[float]) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.column_counts[trie.depth == depth], bins=list(bins))


def coverage_stats(data: ObservationSet | FilledTable, trie: ExecutionTrie | None = None) -> CoverageStats:
    trie = trie if trie is not None else data.trie
    if isinstance(data, FilledTable):
        counts = data.mask.sum(axis=1)
        n_req = data.values.shape[1]
    else:
        counts = data.column_counts()
        n_req = data.n_requests
    cell, col = {}, {}
    for d in range(1, trie.template.max_depth + 1):
        sel = trie.depth == d
        cell[d] = float(counts[sel].sum() / (sel.sum() * n_req))
        col[d] = float((counts[sel] > 0).mean())
    return CoverageStats(cell, col, counts)
