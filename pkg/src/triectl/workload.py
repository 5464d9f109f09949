"""Synthetic ground-truth worlds: the oracle every estimator is checked against.

Every random quantity is drawn from a stream keyed by ``(seed, purpose, prefix)``
so a world is a pure function of its config and seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit

from .catalog import ConfigError, ModelCatalog, WorkflowTemplate, validate_config
from .trie import Annotation, ExecutionTrie, Prefix, build_trie, parse_prefix, prefix_key

_STREAMS = {"difficulty": 1, "outcome": 2, "latency": 3, "cost": 4, "affinity": 5, "row": 6, "noise": 7}


def _key(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def stream(seed: int, purpose: str, key: str = "") -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), _STREAMS[purpose], _key(key)]))


@dataclass
class WorldConfig:
    n_requests: int
    law: dict
    difficulty: dict = field(default_factory=lambda: {"kind": "none"})
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_requests <= 0:
            raise ConfigError("world.n_requests", "must be > 0")
        if self.law.get("kind") not in ("table", "logistic"):
            raise ConfigError("world.law.kind", f"unknown law {self.law.get('kind')!r}")
        probs = dict(self.overrides)
        if self.law["kind"] == "table":
            probs.update(self.law.get("conditional", {}))
            probs["<default>"] = self.law.get("default", 0.0)
        for k, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"world.law[{k}]", f"conditional probability {p} outside [0,1]")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(int(d["n_requests"]), dict(d["law"]), dict(d.get("difficulty", {"kind": "none"})),
                   dict(d.get("overrides", {})))

    def to_dict(self) -> dict:
        return {"n_requests": self.n_requests, "difficulty": self.difficulty, "law": self.law,
                "overrides": self.overrides}


@dataclass(frozen=True)
class TraceRecord:
    request_id: int
    path: Prefix
    reached: tuple[bool, ...]
    stage_cost: tuple[float, ...]  # 0.0 for unreached stages
    stage_latency: tuple[float, ...]
    success: bool
    stop_depth: int

    @property
    def cost(self) -> float:
        return sum(self.stage_cost)

    @property
    def latency(self) -> float:
        return sum(self.stage_latency)


class GroundTruthWorld:
    """Request-by-node tables of conditional outcomes, stage costs and latencies.

    ``outcome[i, q]`` is the Bernoulli draw "stage at node i succeeds for q given
    every earlier stage failed"; path success is the OR over the prefix chain, so
    the request-path table is prefix-closed by construction.
    """

    def __init__(self, template: WorkflowTemplate, catalog: ModelCatalog, config: WorldConfig, seed: int):
        self.template = template
        self.catalog = catalog
        self.config = config
        self.seed = int(seed)
        self.trie = build_trie(template, catalog)
        for k in config.overrides:
            if parse_prefix(k) not in self.trie or not k:
                raise ConfigError(f"world.overrides[{k}]", "prefix not in template")
        if config.law["kind"] == "table":
            for k in config.law.get("conditional", {}):
                if parse_prefix(k) not in self.trie or not k:
                    raise ConfigError(f"world.law.conditional[{k}]", "prefix not in template")
        self.n = config.n_requests
        self.request_ids = np.arange(self.n)

    @cached_property
    def difficulty(self) -> np.ndarray:
        d = self.config.difficulty
        if d.get("kind", "none") == "none":
            return np.zeros(self.n)
        z = stream(self.seed, "difficulty").standard_normal(self.n)
        return d.get("mean", 0.0) + d.get("sd", 1.0) * z

    # -- the conditional-accuracy law --------------------------------------
    def _affinity(self, prev: str, model: str) -> float:
        sd = self.config.law.get("affinity_sd", 0.0)
        return sd * stream(self.seed, "affinity", f"{prev}>{model}").standard_normal() if sd else 0.0

    def _row(self, prefix: Prefix) -> float:
        deep = self.config.law["deep"]
        z = stream(self.seed, "row", prefix_key(prefix)).standard_normal()
        return deep.get("row_mean", 0.0) + deep.get("row_sd", 0.0) * z

    def node_prob(self, prefix: Prefix, difficulty: np.ndarray | None = None) -> np.ndarray:
        """Success probability of the stage at ``prefix`` given its ancestors failed."""
        d = self.difficulty if difficulty is None else np.asarray(difficulty, dtype=float)
        key = prefix_key(prefix)
        if key in self.config.overrides:
            return np.full(d.shape, float(self.config.overrides[key]))
        law = self.config.law
        if law["kind"] == "table":
            return np.full(d.shape, float(law.get("conditional", {}).get(key, law.get("default", 0.0))))
        depth, model = len(prefix), prefix[-1]
        strength = law["strength"][model] - law.get("depth_penalty", 0.0) * (depth - 1)
        deep = law.get("deep")
        if deep and deep.get("rank1") and depth >= 3:
            # separable in (prefix, model, request): the population conditional block is rank-1
            p = expit(self._row(prefix[:-1])) * expit(strength) * expit(deep.get("shift", 0.0) - d)
            noise_sd = deep.get("noise_sd", 0.0)
            if noise_sd:
                p = p * np.exp(noise_sd * stream(self.seed, "noise", key).standard_normal())
            return np.clip(p, 0.0, 1.0)
        logit = strength - d
        if depth >= 2:
            logit = logit + self._affinity(prefix[-2], model)
        return expit(logit)

    # -- materialized tables (lazy, cached) ----------------------------------
    @cached_property
    def outcome(self) -> np.ndarray:
        out = np.zeros((len(self.trie), self.n), dtype=bool)
        for node in self.trie.nodes[1:]:
            u = stream(self.seed, "outcome", prefix_key(node.prefix)).random(self.n)
            out[node.index] = u < self.node_prob(node.prefix)
        return out

    @cached_property
    def stage_latency(self) -> np.ndarray:
        lat = np.zeros((len(self.trie), self.n))
        for node in self.trie.nodes[1:]:
            m = self.catalog[node.prefix[-1]]
            mult = 1.0
            if m.latency_sigma > 0:
                z = stream(self.seed, "latency", prefix_key(node.prefix)).standard_normal(self.n)
                mult = np.exp(m.latency_sigma * z - 0.5 * m.latency_sigma ** 2)
            lat[node.index] = m.latency_mean * mult + self.template.tool_overhead(node.depth)[0]
        return lat

    @cached_property
    def stage_cost(self) -> np.ndarray:
        cost = np.zeros((len(self.trie), self.n))
        for node in self.trie.nodes[1:]:
            m = self.catalog[node.prefix[-1]]
            mult = 1.0
            if m.cost_sigma > 0:
                z = stream(self.seed, "cost", prefix_key(node.prefix)).standard_normal(self.n)
                mult = np.exp(m.cost_sigma * z - 0.5 * m.cost_sigma ** 2)
            cost[node.index] = m.cost * mult + self.template.tool_overhead(node.depth)[1]
        return cost

    @cached_property
    def success(self) -> np.ndarray:
        """``success[i, q]`` = A(q, prefix_i): some stage on the prefix succeeded."""
        acc = np.zeros_like(self.outcome)
        parent = self.trie.parent
        for i in range(1, len(self.trie)):
            acc[i] = acc[parent[i]] | self.outcome[i]
        return acc

    def A(self, request_id: int, path: Iterable[str]) -> bool:
        return bool(self.success[self.trie.index[tuple(path)], request_id])

    def node_outcome(self, request_id: int, prefix: Iterable[str]) -> bool:
        return bool(self.outcome[self.trie.index[tuple(prefix)], request_id])


def generate_world(template: WorkflowTemplate, catalog: ModelCatalog, config: WorldConfig | Mapping,
                   seed: int) -> GroundTruthWorld:
    if not isinstance(config, WorldConfig):
        config = WorldConfig.from_dict(config)
    template.validate_against(catalog)
    return GroundTruthWorld(template, catalog, config, seed)


def world_from_config(doc: dict, seed: int | None = None) -> GroundTruthWorld:
    """Build a world from a full JSON config document (catalog + template + world)."""
    validate_config(doc)
    seed = doc.get("seed", 0) if seed is None else seed
    return generate_world(WorkflowTemplate.from_dict(doc["template"]),
                          ModelCatalog.from_dict(doc["catalog"]), WorldConfig.from_dict(doc["world"]), seed)


def _check_trie(world: GroundTruthWorld, trie: ExecutionTrie | None) -> ExecutionTrie:
    if trie is None:
        return world.trie
    if trie._prefixes != world.trie._prefixes:
        raise ValueError("trie was not built from the world's template/catalog")
    return trie


@dataclass(frozen=True)
class ColumnTruth:
    acc: float
    cost: float
    lat: float
    n_reached: int


def true_column_means(world: GroundTruthWorld, trie: ExecutionTrie | None = None) -> dict[Prefix, ColumnTruth]:
    """Exhaustive (mu, expected spend, conditional latency sum) for every node.

    Latency of a stage no request reaches falls back to its unconditional mean.
    """
    trie = _check_trie(world, trie)
    parent = trie.parent
    succ = world.success
    n = len(trie)
    spend = np.zeros((n, world.n))
    lat_sum = np.zeros(n)
    reached_count = np.zeros(n, dtype=np.int64)
    reached_count[0] = world.n
    for i in range(1, n):
        reached = ~succ[parent[i]]
        spend[i] = spend[parent[i]] + np.where(reached, world.stage_cost[i], 0.0)
        k = int(reached.sum())
        reached_count[i] = k
        stage_lat = world.stage_latency[i]
        lat_sum[i] = lat_sum[parent[i]] + (stage_lat[reached].mean() if k else stage_lat.mean())
    acc = succ.mean(axis=1)
    cost = spend.mean(axis=1)
    return {node.prefix: ColumnTruth(float(acc[node.index]), float(cost[node.index]),
                                     float(lat_sum[node.index]), int(reached_count[node.index]))
            for node in trie.nodes[1:]}


def oracle_trie(world: GroundTruthWorld) -> ExecutionTrie:
    """World trie annotated with exact column means (supports = |Q| and reach counts)."""
    truth = true_column_means(world)
    return world.trie.with_annotations({
        p: Annotation(t.acc, t.cost, t.lat, world.n, world.n, t.n_reached) for p, t in truth.items()
    })


def configured_column_means(world: GroundTruthWorld, n_quad: int = 80) -> dict[Prefix, float]:
    """Population mu(p) implied by the law itself (Gauss-Hermite over difficulty)."""
    dcfg = world.config.difficulty
    if dcfg.get("kind", "none") == "normal":
        x, w = np.polynomial.hermite_e.hermegauss(n_quad)
        d = dcfg.get("mean", 0.0) + dcfg.get("sd", 1.0) * x
        w = w / w.sum()
    else:
        d, w = np.zeros(1), np.ones(1)
    fail = {(): np.ones_like(d)}
    out = {}
    for node in world.trie.nodes[1:]:
        fail[node.prefix] = fail[node.prefix[:-1]] * (1.0 - world.node_prob(node.prefix, d))
        out[node.prefix] = float(np.dot(w, 1.0 - fail[node.prefix]))
    return out


def realize_run(world: GroundTruthWorld, request_id: int, path: Iterable[str]) -> TraceRecord:
    """Serve one request along ``path``, stopping at the first successful stage."""
    path = tuple(path)
    idx = world.trie.index
    for pos in range(1, len(path) + 1):
        if path[:pos] not in idx:
            raise ValueError(f"infeasible path {prefix_key(path)!r} at position {pos}")
    reached, costs, lats = [], [], []
    stop, success = len(path), False
    for pos in range(1, len(path) + 1):
        i = idx[path[:pos]]
        if success:
            reached.append(False)
            costs.append(0.0)
            lats.append(0.0)
            continue
        reached.append(True)
        costs.append(float(world.stage_cost[i, request_id]))
        lats.append(float(world.stage_latency[i, request_id]))
        if world.outcome[i, request_id]:
            success, stop = True, pos
    return TraceRecord(int(request_id), path, tuple(reached), tuple(costs), tuple(lats), success, stop)
