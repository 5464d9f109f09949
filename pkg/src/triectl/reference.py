"""Reference templates, catalogs and worlds used by tests, demos and configs."""
from __future__ import annotations

import numpy as np

from .catalog import ModelCatalog, ModelSpec, StageFamily, WorkflowTemplate
from .trie import Annotation, ExecutionTrie, build_trie
from .workload import GroundTruthWorld, WorldConfig, generate_world


def uniform_catalog(k: int, cost: float = 1.0, latency: float = 1.0, sigma: float = 0.0) -> ModelCatalog:
    ids = [f"M{i}" for i in range(k)]
    return ModelCatalog(tuple(ModelSpec(m, cost, latency, f"e{i}", sigma) for i, m in enumerate(ids)),
                        tuple(f"e{i}" for i in range(k)))


def gen_repair_template(models, max_depth: int, terminal_depths=()) -> WorkflowTemplate:
    """Generation at depth 1, a repeated repair family at depths 2..max_depth."""
    models = tuple(models)
    stages = [StageFamily("generate", "llm", models)]
    if max_depth > 1:
        stages.append(StageFamily("repair", "llm", models))
    return WorkflowTemplate(tuple(stages), max_depth, frozenset(terminal_depths))


# -- the two-model worked example ------------------------------------------------

TWO_MODEL_CATALOG = ModelCatalog(
    (ModelSpec("G", 1.0, 1.0, "eng-g"), ModelSpec("S", 10.0, 3.5, "eng-s")), ("eng-g", "eng-s"))

TWO_MODEL_ANNOTATIONS = {
    ("G",): (0.72, 1.0, 1.0),
    ("S",): (0.86, 10.0, 3.5),
    ("G", "G"): (0.79, 2.0, 2.1),
    ("G", "S"): (0.91, 11.0, 4.8),
    ("S", "G"): (0.89, 11.0, 4.7),
    ("S", "S"): (0.94, 20.0, 7.0),
}


def two_model_template(terminal_depths=(1, 2)) -> WorkflowTemplate:
    return gen_repair_template(("G", "S"), 2, terminal_depths)


def two_model_trie(terminal_depths=(1, 2)) -> ExecutionTrie:
    """The hand-entered two-model, depth-2 annotated trie."""
    trie = build_trie(two_model_template(terminal_depths), TWO_MODEL_CATALOG)
    return trie.with_annotations({p: Annotation(a, c, t) for p, (a, c, t) in TWO_MODEL_ANNOTATIONS.items()})


def two_model_world(n_requests: int = 10000, seed: int = 7) -> GroundTruthWorld:
    """World whose column means match the worked example's accuracies.

    Conditional cells are the algebraic inverses of the cascade recursion:
    q(l | u failed) = (mu(u.l) - mu(u)) / (1 - mu(u)).
    """
    mu = {p: a for p, (a, _, _) in TWO_MODEL_ANNOTATIONS.items()}
    cond = {}
    for p, a in mu.items():
        if len(p) == 1:
            cond["/".join(p)] = a
        else:
            cond["/".join(p)] = (a - mu[p[:1]]) / (1.0 - mu[p[:1]])
    cfg = WorldConfig(n_requests, {"kind": "table", "conditional": cond})
    return generate_world(two_model_template(), TWO_MODEL_CATALOG, cfg, seed)


# -- the eight-model, depth-3 reference world ------------------------------------

REF_MODELS = [f"M{i}" for i in range(8)]
REF_COST = [0.25, 0.4, 0.6, 1.0, 1.5, 2.2, 3.0, 4.0]
REF_LATENCY = [0.6, 0.8, 1.0, 1.4, 1.8, 2.4, 3.0, 3.6]
REF_STRENGTH = [-0.6, -0.2, 0.1, 0.4, 0.7, 1.0, 1.4, 1.8]


def reference_catalog(latency_sigma: float = 0.0) -> ModelCatalog:
    specs = tuple(ModelSpec(m, c, t, f"e{i}", latency_sigma)
                  for i, (m, c, t) in enumerate(zip(REF_MODELS, REF_COST, REF_LATENCY)))
    return ModelCatalog(specs, tuple(f"e{i}" for i in range(8)))


def reference_law(rank1: bool = True, noise_sd: float = 0.0) -> dict:
    law = {
        "kind": "logistic",
        "strength": dict(zip(REF_MODELS, REF_STRENGTH)),
        "depth_penalty": 0.3,
        "affinity_sd": 0.4,
    }
    if rank1:
        law["deep"] = {"rank1": True, "row_mean": 0.5, "row_sd": 1.0, "shift": 2.5, "noise_sd": noise_sd}
    return law


def reference_world(seed: int = 0, n_requests: int = 2000, latency_sigma: float = 0.0,
                    difficulty_sd: float = 2.0, rank1: bool = True, noise_sd: float = 0.0) -> GroundTruthWorld:
    cfg = WorldConfig(n_requests, reference_law(rank1, noise_sd),
                      {"kind": "normal", "mean": 0.0, "sd": difficulty_sd})
    return generate_world(gen_repair_template(REF_MODELS, 3), reference_catalog(latency_sigma), cfg, seed)


def reference_config(seed: int = 0, n_requests: int = 2000, latency_sigma: float = 0.0) -> dict:
    """The reference world as a JSON config document."""
    return {
        "version": 1,
        "seed": seed,
        "catalog": reference_catalog(latency_sigma).to_dict(),
        "template": gen_repair_template(REF_MODELS, 3).to_dict(),
        "world": WorldConfig(n_requests, reference_law(),
                             {"kind": "normal", "mean": 0.0, "sd": 2.0}).to_dict(),
    }


def shape_template(n_models: int, depth: int) -> tuple[WorkflowTemplate, ModelCatalog]:
    """Full k-ary gen/repair template with unit-cost models."""
    cat = uniform_catalog(n_models)
    return gen_repair_template(cat.ids, depth), cat


def random_annotated_trie(rng: np.random.Generator, k: int, depth: int, monotone: bool = True,
                          terminal_prob: float = 0.7, ties: bool = False) -> ExecutionTrie:
    """Random annotated trie for property tests.

    Monotone tries grow each metric along every chain; ``ties`` draws metrics
    from a coarse grid so equal costs and latencies occur often.
    """
    cat = uniform_catalog(k)
    terminal = {d for d in range(1, depth) if rng.random() < terminal_prob} | {depth}
    trie = build_trie(gen_repair_template(cat.ids, depth, terminal), cat)
    ann = {}
    vals = {(): (0.0, 0.0, 0.0)}

    def draw(scale):
        return float(rng.integers(0, 4)) * scale if ties else float(rng.random()) * scale

    for node in trie.nodes[1:]:
        pa, pc, pt = vals[node.prefix[:-1]]
        if monotone:
            a = pa + (1 - pa) * (draw(0.25) if ties else rng.random() * 0.6)
            c = pc + draw(1.0) + (0.0 if ties else 0.05)
            t = pt + draw(1.0) + (0.0 if ties else 0.05)
        else:
            a, c, t = float(rng.random()), draw(3.0), draw(3.0)
        vals[node.prefix] = (a, c, t)
        ann[node.prefix] = Annotation(round(a, 3) if ties else a, c, t)
    return trie.with_annotations(ann)
