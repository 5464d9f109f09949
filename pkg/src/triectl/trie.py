"""Execution trie: one node per feasible prefix of model choices."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .catalog import ModelCatalog, WorkflowTemplate, canonical_hash

Prefix = tuple[str, ...]

ANNOTATION_VERSION = 1


def prefix_key(prefix: Prefix) -> str:
    return "/".join(prefix)


def parse_prefix(key: str) -> Prefix:
    return tuple(key.split("/")) if key else ()


@dataclass(frozen=True)
class Annotation:
    acc: float
    cost: float
    lat: float
    n_acc: int = 0
    n_cost: int = 0
    n_lat: int = 0


@dataclass(eq=False)
class TrieNode:
    prefix: Prefix
    depth: int
    terminal_eligible: bool
    index: int
    children: dict[str, "TrieNode"] = field(default_factory=dict)
    annotation: Annotation | None = None

    def __repr__(self):
        return f"TrieNode({prefix_key(self.prefix) or '<root>'})"


class ExecutionTrie:
    """Nodes are stored in preorder (children sorted by model id), so every
    subtree occupies the contiguous index range ``[i, i + size[i])``."""

    def __init__(self, template: WorkflowTemplate, catalog: ModelCatalog,
                 annotations: Mapping[Prefix, Annotation] | None = None,
                 _structure: "ExecutionTrie | None" = None):
        self.template = template
        self.catalog = catalog
        if _structure is None:
            template.validate_against(catalog)
            prefixes = []
            self._enumerate((), prefixes)
            self._prefixes = prefixes
        else:
            self._prefixes = _structure._prefixes
            for name in ("parent", "depth", "size", "model_idx", "terminal", "index", "child_table"):
                if name in _structure.__dict__:
                    self.__dict__[name] = _structure.__dict__[name]
        annotations = annotations or {}
        self.nodes: list[TrieNode] = []
        terminal_depths = template.terminal_depths
        by_prefix = {}
        for i, p in enumerate(self._prefixes):
            node = TrieNode(p, len(p), len(p) in terminal_depths, i, annotation=annotations.get(p))
            self.nodes.append(node)
            by_prefix[p] = node
            if p:
                by_prefix[p[:-1]].children[p[-1]] = node
        self._by_prefix = by_prefix

    def _enumerate(self, prefix: Prefix, out: list) -> None:
        out.append(prefix)
        if len(prefix) < self.template.max_depth:
            for m in sorted(self.template.admissible(len(prefix) + 1)):
                self._enumerate(prefix + (m,), out)

    def with_annotations(self, annotations: Mapping[Prefix, Annotation]) -> "ExecutionTrie":
        unknown = [p for p in annotations if p not in self._by_prefix]
        if unknown:
            raise KeyError(f"unknown prefix {prefix_key(unknown[0])!r}")
        return ExecutionTrie(self.template, self.catalog, annotations, _structure=self)

    # -- structure -----------------------------------------------------
    @property
    def root(self) -> TrieNode:
        return self.nodes[0]

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, prefix) -> bool:
        return tuple(prefix) in self._by_prefix

    def node(self, prefix: Iterable[str]) -> TrieNode:
        try:
            return self._by_prefix[tuple(prefix)]
        except KeyError:
            raise KeyError(f"unknown prefix {prefix_key(tuple(prefix))!r}") from None

    @cached_property
    def index(self) -> dict[Prefix, int]:
        return {p: i for i, p in enumerate(self._prefixes)}

    @cached_property
    def parent(self) -> np.ndarray:
        idx = self.index
        return np.array([idx[p[:-1]] if p else -1 for p in self._prefixes], dtype=np.int64)

    @cached_property
    def depth(self) -> np.ndarray:
        return np.array([len(p) for p in self._prefixes], dtype=np.int64)

    @cached_property
    def size(self) -> np.ndarray:
        size = np.ones(len(self._prefixes), dtype=np.int64)
        parent = self.parent
        for i in range(len(size) - 1, 0, -1):
            size[parent[i]] += size[i]
        return size

    @cached_property
    def model_idx(self) -> np.ndarray:
        ids = {m: k for k, m in enumerate(self.catalog.ids)}
        return np.array([ids[p[-1]] if p else -1 for p in self._prefixes], dtype=np.int64)

    @cached_property
    def terminal(self) -> np.ndarray:
        td = self.template.terminal_depths
        return np.array([len(p) in td for p in self._prefixes], dtype=bool)

    @cached_property
    def child_table(self) -> np.ndarray:
        """``child_table[i, k]`` is the child of node i via catalog model k, or -1."""
        table = np.full((len(self._prefixes), len(self.catalog.models)), -1, dtype=np.int64)
        parent, midx = self.parent, self.model_idx
        table[parent[1:], midx[1:]] = np.arange(1, len(self._prefixes))
        return table

    def terminating(self) -> list[TrieNode]:
        return [n for n in self.nodes if n.terminal_eligible]

    def at_depth(self, d: int) -> list[TrieNode]:
        return [n for n in self.nodes if n.depth == d]

    # -- annotations as arrays ----------------------------------------
    @cached_property
    def metric_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(acc, cost, lat) per node; NaN where unannotated."""
        n = len(self.nodes)
        acc, cost, lat = np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan)
        for node in self.nodes:
            a = node.annotation
            if a is not None:
                acc[node.index], cost[node.index], lat[node.index] = a.acc, a.cost, a.lat
        return acc, cost, lat

    @cached_property
    def candidate_bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per subtree: (min cost, min latency, max accuracy) over annotated
        terminal-eligible nodes; +inf / -inf where the subtree has none."""
        acc, cost, lat = self.metric_arrays
        cand = self.terminal & ~np.isnan(acc)
        cmin = np.where(cand, cost, np.inf)
        lmin = np.where(cand, lat, np.inf)
        amax = np.where(cand, acc, -np.inf)
        depth, parent = self.depth, self.parent
        for d in range(int(depth.max()), 0, -1):
            sel = np.nonzero(depth == d)[0]
            np.minimum.at(cmin, parent[sel], cmin[sel])
            np.minimum.at(lmin, parent[sel], lmin[sel])
            np.maximum.at(amax, parent[sel], amax[sel])
        return cmin, lmin, amax

    def annotations(self) -> dict[Prefix, Annotation]:
        return {n.prefix: n.annotation for n in self.nodes if n.annotation is not None}

    @property
    def template_hash(self) -> str:
        return canonical_hash(self.template.to_dict())

    @property
    def catalog_hash(self) -> str:
        return canonical_hash(self.catalog.to_dict())


def build_trie(template: WorkflowTemplate, catalog: ModelCatalog) -> ExecutionTrie:
    return ExecutionTrie(template, catalog)


class TrieView:
    """Read-only window onto the subtree under ``root_prefix``."""

    def __init__(self, trie: ExecutionTrie, root_prefix: Prefix = ()):
        self.trie = trie
        self.root = trie.node(root_prefix)
        self.lo = self.root.index
        self.hi = self.lo + int(trie.size[self.lo])

    @property
    def prefix(self) -> Prefix:
        return self.root.prefix

    def __len__(self) -> int:
        return self.hi - self.lo

    def __contains__(self, prefix) -> bool:
        prefix = tuple(prefix)
        return prefix in self.trie and prefix[:len(self.prefix)] == self.prefix

    def __iter__(self) -> Iterator[TrieNode]:
        return iter(self.trie.nodes[self.lo:self.hi])

    def node(self, prefix: Iterable[str]) -> TrieNode:
        prefix = tuple(prefix)
        if prefix not in self:
            raise KeyError(f"prefix {prefix_key(prefix)!r} not in view {prefix_key(self.prefix)!r}")
        return self.trie.node(prefix)

    def prefixes(self) -> list[Prefix]:
        return [n.prefix for n in self]


def reroot(trie: ExecutionTrie | TrieView, prefix: Iterable[str]) -> TrieView:
    """View rooted at ``prefix``; for a view the prefix is relative to its root."""
    prefix = tuple(prefix)
    if isinstance(trie, TrieView):
        return TrieView(trie.trie, trie.prefix + prefix)
    return TrieView(trie, prefix)


def as_view(t: ExecutionTrie | TrieView) -> TrieView:
    return t if isinstance(t, TrieView) else TrieView(t)


# -- monotonicity -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    parent: Prefix
    child: Prefix
    metric: str
    parent_value: float
    child_value: float

    def __str__(self):
        return (f"{prefix_key(self.parent) or '<root>'} -> {prefix_key(self.child)}: "
                f"{self.metric} {self.parent_value:.6g} > {self.child_value:.6g}")


def check_monotonicity(trie: ExecutionTrie | TrieView, tol: float = 1e-9) -> list[Violation]:
    """Every annotated parent->child edge where a metric decreases by more than ``tol``."""
    out = []
    for node in as_view(trie):
        a = node.annotation
        if a is None:
            continue
        for child in node.children.values():
            b = child.annotation
            if b is None:
                continue
            for metric in ("acc", "cost", "lat"):
                pv, cv = getattr(a, metric), getattr(b, metric)
                if cv < pv - tol:
                    out.append(Violation(node.prefix, child.prefix, metric, pv, cv))
    return out


# -- serialization -------------------------------------------------------------

class AnnotationFileError(ValueError):
    pass


def save_annotations(trie: ExecutionTrie, destination: str | Path) -> None:
    body = {}
    for node in trie.nodes:
        a = node.annotation
        if a is not None:
            body[prefix_key(node.prefix)] = {
                "acc": a.acc, "cost": a.cost, "lat": a.lat,
                "n_acc": a.n_acc, "n_cost": a.n_cost, "n_lat": a.n_lat,
            }
    doc = {
        "version": ANNOTATION_VERSION,
        "template_hash": trie.template_hash,
        "catalog_hash": trie.catalog_hash,
        "annotations": body,
    }
    Path(destination).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _number(value, key: str, field_name: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise AnnotationFileError(f"{key}: malformed {field_name} {value!r}")
    if integer and not isinstance(value, int):
        raise AnnotationFileError(f"{key}: {field_name} must be an integer")
    if not math.isfinite(value):
        raise AnnotationFileError(f"{key}: non-finite {field_name}")
    return value


def load_annotations(source: str | Path, template: WorkflowTemplate, catalog: ModelCatalog,
                     force: bool = False) -> ExecutionTrie:
    """Inverse of :func:`save_annotations`.  Prefixes missing from the file stay
    unannotated; prefixes absent from the template are rejected."""
    try:
        doc = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationFileError(f"not valid JSON: {exc}") from None
    if doc.get("version") != ANNOTATION_VERSION:
        raise AnnotationFileError(f"unsupported annotation version {doc.get('version')!r}")
    trie = build_trie(template, catalog)
    if not force:
        if doc.get("template_hash") != trie.template_hash:
            raise AnnotationFileError("template hash mismatch (use force to override)")
        if doc.get("catalog_hash") != trie.catalog_hash:
            raise AnnotationFileError("catalog hash mismatch (use force to override)")
    annotations = {}
    for key, rec in doc.get("annotations", {}).items():
        prefix = parse_prefix(key)
        if prefix not in trie or not prefix:
            raise AnnotationFileError(f"prefix {key!r} not in template")
        try:
            annotations[prefix] = Annotation(
                acc=_number(rec["acc"], key, "acc"), cost=_number(rec["cost"], key, "cost"),
                lat=_number(rec["lat"], key, "lat"),
                n_acc=_number(rec.get("n_acc", 0), key, "n_acc", True),
                n_cost=_number(rec.get("n_cost", 0), key, "n_cost", True),
                n_lat=_number(rec.get("n_lat", 0), key, "n_lat", True),
            )
        except KeyError as exc:
            raise AnnotationFileError(f"{key}: missing field {exc.args[0]}") from None
    return trie.with_annotations(annotations)


# -- annotation from served traces ----------------------------------------------

def annotate_from_traces(trie: ExecutionTrie, traces: Iterable) -> ExecutionTrie:
    """Annotate every node from traces whose path passes through it.

    Accuracy is success within the prefix, cost is realized spend truncated at
    the prefix (unreached stages count 0), latency sums per-stage means over the
    traces that actually reached each stage (the catalog mean where none did).
    Nodes no trace passes through stay unannotated.
    """
    n = len(trie)
    idx = trie.index
    n_pass = np.zeros(n, dtype=np.int64)
    acc_sum = np.zeros(n)
    cost_sum = np.zeros(n)
    lat_sum = np.zeros(n)
    lat_n = np.zeros(n, dtype=np.int64)
    for tr in traces:
        path = tuple(tr.path)
        if path not in idx:
            raise ValueError(f"trace path {prefix_key(path)!r} not in trie")
        spent = 0.0
        for k in range(1, len(path) + 1):
            i = idx[path[:k]]
            spent += tr.stage_cost[k - 1]
            n_pass[i] += 1
            cost_sum[i] += spent
            if tr.success and tr.stop_depth <= k:
                acc_sum[i] += 1.0
            if tr.reached[k - 1]:
                lat_sum[i] += tr.stage_latency[k - 1]
                lat_n[i] += 1
    parent = trie.parent
    lat_total = np.full(n, np.nan)
    lat_total[0] = 0.0
    annotations = {}
    for i in range(1, n):
        if lat_n[i]:
            stage = lat_sum[i] / lat_n[i]
        else:
            node = trie.nodes[i]
            stage = trie.catalog[node.prefix[-1]].latency_mean + trie.template.tool_overhead(node.depth)[0]
        lat_total[i] = lat_total[parent[i]] + stage
        if n_pass[i] == 0:
            continue
        annotations[trie._prefixes[i]] = Annotation(
            float(acc_sum[i] / n_pass[i]), float(cost_sum[i] / n_pass[i]), float(lat_total[i]),
            int(n_pass[i]), int(n_pass[i]), int(lat_n[i]))
    return trie.with_annotations(annotations)
