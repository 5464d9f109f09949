"""Column-mean estimators for the request-path accuracy table.

Cascade profiling observes deep columns only on requests that failed every
shallower stage, so naive column averages are biased.  The cascade estimators
work instead with conditional cells q(model | prefix failed), which those
observations estimate without bias, and rebuild path means from them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .profiler import DIRECT, FilledTable, ObservationSet, subtree_fill_in
from .trie import Annotation, ExecutionTrie, Prefix

METHODS = ("direct", "prefix_avg", "impute", "lite", "smoothed")


@dataclass
class ColumnMeanEstimate:
    trie: ExecutionTrie
    mu: np.ndarray  # per node, root = 0
    method: str
    coverage: float | None = None
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, prefix: Iterable[str]) -> float:
        return float(self.mu[self.trie.index[tuple(prefix)]])

    def as_dict(self) -> dict[Prefix, float]:
        return {n.prefix: float(self.mu[n.index]) for n in self.trie.nodes[1:] if n.terminal_eligible}


def _backfill(trie: ExecutionTrie, sums: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, int]:
    """Column means, with unobserved columns inheriting their parent's estimate."""
    mu = np.zeros(len(trie))
    parent = trie.parent
    missing = 0
    for i in range(1, len(trie)):
        if counts[i]:
            mu[i] = sums[i] / counts[i]
        else:
            mu[i] = mu[parent[i]]
            missing += 1
    return mu, missing


def estimate_direct_average(data: FilledTable | ObservationSet, trie: ExecutionTrie | None = None) -> ColumnMeanEstimate:
    """Raw mean of the directly observed cascade entries in each column."""
    if isinstance(data, ObservationSet):
        trie = trie or data.trie
        n = len(trie)
        sums = np.bincount(data.node, weights=data.outcome, minlength=n)
        counts = np.bincount(data.node, minlength=n)
    else:
        trie = trie or data.trie
        direct = data.provenance == DIRECT
        sums = np.where(direct, data.values, 0).sum(axis=1)
        counts = direct.sum(axis=1)
    mu, missing = _backfill(trie, sums.astype(float), counts)
    return ColumnMeanEstimate(trie, mu, "direct", metadata={"unobserved_columns": missing})


def estimate_prefix_avg(filled: FilledTable, trie: ExecutionTrie | None = None) -> ColumnMeanEstimate:
    """Column mean over direct and filled-in cells."""
    trie = trie or filled.trie
    mask = filled.mask
    sums = np.where(mask, filled.values, 0).sum(axis=1).astype(float)
    mu, missing = _backfill(trie, sums, mask.sum(axis=1))
    return ColumnMeanEstimate(trie, mu, "prefix_avg", metadata={"unobserved_columns": missing})


def als_complete(Y: np.ndarray, mask: np.ndarray, rank: int, n_iter: int = 50, ridge: float = 1e-2,
                 seed: int = 0) -> tuple[np.ndarray, float]:
    """Masked alternating least squares ``Y ~ U V^T``; returns (U V^T, masked RMS residual)."""
    n, m = Y.shape
    M = mask.astype(float)
    Yz = np.where(mask, Y, 0.0)
    # warm start from the SVD of the column-mean-filled matrix
    counts = M.sum(axis=0)
    col = np.divide(Yz.sum(axis=0), counts, out=np.full(m, Yz.sum() / max(M.sum(), 1.0)), where=counts > 0)
    X0 = np.where(mask, Y, col)
    try:
        u, s, vt = np.linalg.svd(X0, full_matrices=False)
        V = vt[:rank].T * np.sqrt(s[:rank])
    except np.linalg.LinAlgError:
        V = np.random.default_rng(seed).standard_normal((m, rank)) * 0.1
    eye = ridge * np.eye(rank)

    def solve(Mask, Yd, F):
        # row-wise normal equations, batched: (sum_j m_ij f_j f_j^T + ridge I) x_i = sum_j m_ij y_ij f_j
        FF = np.einsum("jr,js->jrs", F, F).reshape(F.shape[0], -1)
        A = (Mask @ FF).reshape(-1, rank, rank) + eye
        b = Yd @ F
        return np.linalg.solve(A, b[..., None])[..., 0]

    for _ in range(n_iter):
        U = solve(M, Yz, V)
        V = solve(M.T, Yz.T, U)
    R = U @ V.T
    resid = float(np.sqrt(((R - Y)[mask] ** 2).mean())) if mask.any() else 0.0
    return R, resid


def estimate_prefix_lowrank_impute(filled: FilledTable, trie: ExecutionTrie | None = None, rank: int = 2,
                                   n_iter: int = 50, ridge: float = 1e-2) -> ColumnMeanEstimate:
    """Fill-in, then complete the missing cells with a rank-``rank`` factorization."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    trie = trie or filled.trie
    cols = np.arange(1, len(trie))
    mask = filled.mask[cols].T
    Y = filled.values[cols].T.astype(float)
    R, resid = als_complete(Y, mask, rank, n_iter, ridge)
    completed = np.where(mask, Y, np.clip(R, 0.0, 1.0))
    mu = np.zeros(len(trie))
    mu[cols] = completed.mean(axis=0)
    return ColumnMeanEstimate(trie, mu, "impute", metadata={"rank": rank, "residual": resid})


@dataclass
class ConditionalMatrix:
    """Cell (u, model) estimates q(model | every stage on u failed).

    Rows are the internal nodes (the root row holds depth-1 columns), in trie
    order; ``child`` maps each cell to its trie node, -1 where no child exists.
    """

    trie: ExecutionTrie
    rows: np.ndarray  # node index per row
    models: list[str]
    values: np.ndarray  # NaN where unobserved
    counts: np.ndarray
    child: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.counts > 0

    def row_depth(self) -> np.ndarray:
        return self.trie.depth[self.rows]

    def cell(self, prefix: Iterable[str], model: str) -> float:
        r = int(np.nonzero(self.rows == self.trie.index[tuple(prefix)])[0][0])
        return float(self.values[r, self.models.index(model)])


def build_conditional_matrix(obs: ObservationSet, trie: ExecutionTrie | None = None) -> ConditionalMatrix:
    trie = trie or obs.trie
    n = len(trie)
    sums = np.bincount(obs.node, weights=obs.outcome, minlength=n)
    counts = np.bincount(obs.node, minlength=n)
    rows = np.nonzero(trie.depth < trie.template.max_depth)[0]
    child = trie.child_table[rows]
    safe = np.where(child >= 0, child, 0)
    cnt = np.where(child >= 0, counts[safe], 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(cnt > 0, sums[safe] / cnt, np.nan)
    return ConditionalMatrix(trie, rows, list(trie.catalog.ids), vals, cnt, child)


def _depth_fallback(Q: ConditionalMatrix, values: np.ndarray) -> tuple[np.ndarray, int]:
    """Fill unobserved cells with the mean observed cell of their depth row-group."""
    out = values.copy()
    exists = Q.child >= 0
    hole = exists & np.isnan(out)
    if not hole.any():
        return out, 0
    obs_all = out[exists & ~np.isnan(out)]
    global_mean = float(obs_all.mean()) if obs_all.size else 0.0
    rd = Q.row_depth()
    for d in np.unique(rd):
        sel = rd == d
        block = out[sel]
        seen = block[exists[sel] & ~np.isnan(block)]
        fill = float(seen.mean()) if seen.size else global_mean
        block[hole[sel]] = fill
        out[sel] = block
    return out, int(hole.sum())


def _recurse(Q: ConditionalMatrix, values: np.ndarray) -> np.ndarray:
    trie = Q.trie
    q_node = np.zeros(len(trie))
    ok = Q.child >= 0
    q_node[Q.child[ok]] = np.clip(values[ok], 0.0, 1.0)
    mu = np.zeros(len(trie))
    parent = trie.parent
    for i in range(1, len(trie)):
        p = mu[parent[i]]
        mu[i] = p + (1.0 - p) * q_node[i]
    return mu


def estimate_cascade_lite(obs: ObservationSet, trie: ExecutionTrie | None = None,
                          Q: ConditionalMatrix | None = None) -> ColumnMeanEstimate:
    """mu(u.l) = mu(u) + (1 - mu(u)) q(l | u failed), from raw conditional means."""
    Q = Q or build_conditional_matrix(obs, trie)
    vals, n_fallback = _depth_fallback(Q, Q.values)
    return ColumnMeanEstimate(Q.trie, _recurse(Q, vals), "lite",
                              metadata={"fallback_cells": n_fallback, "fallback": "depth row-group mean"})


@dataclass
class Rank1Result:
    block: np.ndarray
    iterations: int
    converged: bool
    singular_value: float
    flagged_columns: list[int]


def _leading_pair(X: np.ndarray, v: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray, np.ndarray]:
    u = X @ v
    for _ in range(max_iter):
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0, np.zeros(X.shape[0]), v
        u = u / nu
        w = X.T @ u
        s = np.linalg.norm(w)
        if s == 0:
            return 0.0, u, v
        w = w / s
        done = np.max(np.abs(w - v)) < tol
        v = w
        u = X @ v
        if done:
            break
    s = np.linalg.norm(u)
    return float(s), (u / s if s > 0 else u), v


def rank1_project(block: np.ndarray, mask: np.ndarray | None = None, tol: float = 1e-8,
                  max_iter: int = 500, clip: bool = True) -> Rank1Result:
    """Best rank-1 fit of a partially observed block.

    Missing cells start at their column means (the block mean for all-missing
    columns, which are flagged) and are then re-imputed from the current rank-1
    fit until the fit stops moving.
    """
    X = np.array(block, dtype=float)
    mask = ~np.isnan(X) if mask is None else np.asarray(mask, dtype=bool)
    if X.size == 0:
        raise ValueError("empty block")
    missing = ~mask
    observed = np.where(mask, X, 0.0)
    counts = mask.sum(axis=0)
    global_mean = float(observed.sum() / counts.sum()) if counts.sum() else 0.0
    col = np.divide(observed.sum(axis=0), counts, out=np.full(X.shape[1], global_mean), where=counts > 0)
    flagged = [int(j) for j in np.nonzero(counts == 0)[0]]
    X = np.where(mask, X, col)
    v = X.mean(axis=0)
    v = v / np.linalg.norm(v) if np.linalg.norm(v) > 0 else np.full(X.shape[1], 1 / np.sqrt(X.shape[1]))
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        s, u, v = _leading_pair(X, v, tol * 1e-2, max_iter)
        R = s * np.outer(u, v)
        if not missing.any():
            converged = True
            break
        delta = np.max(np.abs(R[missing] - X[missing]))
        X[missing] = R[missing]
        if delta < tol:
            converged = True
            break
    if clip:
        R = np.clip(R, 0.0, 1.0)
    return Rank1Result(R, it, converged, s, flagged)


def estimate_cascade_smoothed(obs: ObservationSet, trie: ExecutionTrie | None = None,
                              Q: ConditionalMatrix | None = None) -> ColumnMeanEstimate:
    """Lite, with every conditional block feeding depth >= 3 replaced by its rank-1 projection."""
    Q = Q or build_conditional_matrix(obs, trie)
    vals = Q.values.copy()
    rd = Q.row_depth()
    info = {}
    for d in np.unique(rd):
        if d + 1 < 3:
            continue
        sel = np.nonzero(rd == d)[0]
        exists = Q.child[sel] >= 0
        cols = np.nonzero(exists.any(axis=0))[0]
        sub = vals[np.ix_(sel, cols)]
        if not (~np.isnan(sub)).any():
            continue
        res = rank1_project(sub, ~np.isnan(sub))
        vals[np.ix_(sel, cols)] = np.where(exists[:, cols], res.block, np.nan)
        info[int(d + 1)] = {"iterations": res.iterations, "converged": res.converged,
                            "flagged_columns": res.flagged_columns}
    vals, n_fallback = _depth_fallback(Q, vals)
    return ColumnMeanEstimate(Q.trie, _recurse(Q, vals), "smoothed",
                              metadata={"fallback_cells": n_fallback, "projection": info})


def estimate(method: str, obs: ObservationSet, trie: ExecutionTrie | None = None,
             filled: FilledTable | None = None, **kw) -> ColumnMeanEstimate:
    """Dispatch by method tag (one of ``METHODS``)."""
    trie = trie or obs.trie
    if method in ("prefix_avg", "impute") and filled is None:
        filled = subtree_fill_in(obs, trie)
    if method == "direct":
        est = estimate_direct_average(obs, trie)
    elif method == "prefix_avg":
        est = estimate_prefix_avg(filled, trie)
    elif method == "impute":
        est = estimate_prefix_lowrank_impute(filled, trie, **kw)
    elif method == "lite":
        est = estimate_cascade_lite(obs, trie)
    elif method == "smoothed":
        est = estimate_cascade_smoothed(obs, trie)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if obs.budget is not None and obs.budget > 0:
        est.coverage = obs.budget
    return est


# -- error reporting ------------------------------------------------------------

@dataclass(frozen=True)
class ErrorStats:
    mean_signed: float
    mean_abs: float
    max_abs: float
    n_columns: int


@dataclass
class ErrorReport:
    method: str
    overall: ErrorStats
    by_depth: dict[int, ErrorStats]

    def rows(self) -> list[dict]:
        out = []
        for depth, st in [("all", self.overall)] + sorted(self.by_depth.items()):
            out.append({"method": self.method, "depth": depth,
                        "mean_signed": f"{st.mean_signed:.6f}", "mean_abs": f"{st.mean_abs:.6f}",
                        "max_abs": f"{st.max_abs:.6f}", "n_columns": st.n_columns})
        return out


ERROR_FIELDS = ["method", "depth", "mean_signed", "mean_abs", "max_abs", "n_columns"]


def write_error_csv(reports: Iterable[ErrorReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ERROR_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.rows())


def _stats(err: np.ndarray) -> ErrorStats:
    if err.size == 0:
        return ErrorStats(0.0, 0.0, 0.0, 0)
    return ErrorStats(float(err.mean()), float(np.abs(err).mean()), float(np.abs(err).max()), int(err.size))


def error_report(est: ColumnMeanEstimate | Mapping[Prefix, float], truth: Mapping, method: str | None = None) -> ErrorReport:
    """Signed error (estimate minus truth) over terminating columns, overall and per depth.

    ``truth`` maps prefix to a float or to anything with an ``acc`` attribute.
    """
    pred = est.as_dict() if isinstance(est, ColumnMeanEstimate) else dict(est)
    method = method or (est.method if isinstance(est, ColumnMeanEstimate) else "external")
    keys = sorted(pred, key=lambda p: (len(p), p))
    err, depth = [], []
    for p in keys:
        t = truth[p]
        err.append(pred[p] - float(getattr(t, "acc", t)))
        depth.append(len(p))
    err, depth = np.array(err), np.array(depth)
    by_depth = {int(d): _stats(err[depth == d]) for d in np.unique(depth)}
    return ErrorReport(method, _stats(err), by_depth)


# -- estimates as trie annotations ------------------------------------------------

def annotate_estimate(est: ColumnMeanEstimate, obs: ObservationSet) -> ExecutionTrie:
    """Trie annotated with estimated accuracy and profiled cost/latency.

    Stage cost and latency are per-node means over the entries observed there
    (model-level means where a node has none).  Expected spend discounts each
    stage by the estimated chance its prefix already succeeded.
    """
    trie = est.trie
    n = len(trie)
    cnt = np.bincount(obs.node, minlength=n)
    cost_sum = np.bincount(obs.node, weights=obs.cost, minlength=n)
    lat_sum = np.bincount(obs.node, weights=obs.latency, minlength=n)
    midx = trie.model_idx
    k = len(trie.catalog.models)
    m_of_entry = midx[obs.node]
    m_cnt = np.bincount(m_of_entry, minlength=k)
    m_cost = np.bincount(m_of_entry, weights=obs.cost, minlength=k)
    m_lat = np.bincount(m_of_entry, weights=obs.latency, minlength=k)
    spec_cost = np.array([m.cost for m in trie.catalog.models])
    spec_lat = np.array([m.latency_mean for m in trie.catalog.models])
    with np.errstate(invalid="ignore", divide="ignore"):
        m_cost = np.where(m_cnt > 0, m_cost / m_cnt, spec_cost)
        m_lat = np.where(m_cnt > 0, m_lat / m_cnt, spec_lat)
        stage_cost = np.where(cnt > 0, cost_sum / cnt, m_cost[midx])
        stage_lat = np.where(cnt > 0, lat_sum / cnt, m_lat[midx])
    parent = trie.parent
    C = np.zeros(n)
    T = np.zeros(n)
    ann = {}
    for i in range(1, n):
        p = parent[i]
        C[i] = C[p] + (1.0 - est.mu[p]) * stage_cost[i]
        T[i] = T[p] + stage_lat[i]
        ann[trie._prefixes[i]] = Annotation(float(est.mu[i]), float(C[i]), float(T[i]),
                                            int(cnt[i]), int(cnt[i]), int(cnt[i]))
    return trie.with_annotations(ann)
