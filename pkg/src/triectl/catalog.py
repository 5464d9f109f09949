"""Model catalogs, workflow templates and the JSON config schema."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is a dotted path to the offending entry."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


@dataclass(frozen=True)
class ModelSpec:
    id: str
    cost: float
    latency_mean: float
    engine: str
    latency_sigma: float = 0.0  # lognormal, mean-one multiplier
    cost_sigma: float = 0.0


@dataclass(frozen=True)
class ModelCatalog:
    models: tuple[ModelSpec, ...]
    engines: tuple[str, ...]

    def __post_init__(self):
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigError("catalog.models", "model ids must be unique")
        for i, m in enumerate(self.models):
            where = f"catalog.models[{i}]"
            if not m.cost > 0:
                raise ConfigError(f"{where}.cost", "must be > 0")
            if not m.latency_mean > 0:
                raise ConfigError(f"{where}.latency_mean", "must be > 0")
            if m.latency_sigma < 0 or m.cost_sigma < 0:
                raise ConfigError(where, "noise sigma must be >= 0")
            if m.engine not in self.engines:
                raise ConfigError(f"{where}.engine", f"unknown engine {m.engine!r}")

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.models]

    def __getitem__(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def index(self, model_id: str) -> int:
        return self.ids.index(model_id)

    def to_dict(self) -> dict:
        return {
            "engines": list(self.engines),
            "models": [
                {
                    "id": m.id,
                    "cost": m.cost,
                    "latency_mean": m.latency_mean,
                    "latency_noise": {"kind": "lognormal", "sigma": m.latency_sigma}
                    if m.latency_sigma > 0 else {"kind": "none"},
                    "cost_sigma": m.cost_sigma,
                    "engine": m.engine,
                }
                for m in self.models
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCatalog":
        models = []
        for m in d["models"]:
            noise = m.get("latency_noise", {"kind": "none"})
            sigma = float(noise.get("sigma", 0.0)) if noise["kind"] == "lognormal" else 0.0
            models.append(ModelSpec(
                id=m["id"], cost=float(m["cost"]), latency_mean=float(m["latency_mean"]),
                engine=m["engine"], latency_sigma=sigma, cost_sigma=float(m.get("cost_sigma", 0.0)),
            ))
        return cls(tuple(models), tuple(d["engines"]))


@dataclass(frozen=True)
class StageFamily:
    id: str
    kind: str  # "llm" (configurable) or "tool"
    models: tuple[str, ...] = ()
    latency: float = 0.0  # tool stages only
    cost: float = 0.0


@dataclass(frozen=True)
class WorkflowTemplate:
    """Ordered stage families plus the bound on configurable invocations.

    Configurable families fill depths 1, 2, ... in order and the last one
    repeats until ``max_depth`` (a bounded refinement loop).  A tool family
    runs after every invocation of the configurable family listed before it.
    """

    stages: tuple[StageFamily, ...]
    max_depth: int
    terminal_depths: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.max_depth < 1:
            raise ConfigError("template.max_depth", "must be >= 1")
        if not self.terminal_depths:
            object.__setattr__(self, "terminal_depths", frozenset(range(1, self.max_depth + 1)))
        bad = [d for d in self.terminal_depths if not 1 <= d <= self.max_depth]
        if bad:
            raise ConfigError("template.terminal_depths", f"depths {sorted(bad)} outside 1..{self.max_depth}")
        if self.max_depth not in self.terminal_depths:
            raise ConfigError("template.terminal_depths", "must contain max_depth")
        if not any(s.kind == "llm" for s in self.stages):
            raise ConfigError("template.stages", "needs at least one configurable stage")
        if self.stages[0].kind != "llm":
            raise ConfigError("template.stages[0]", "first stage must be configurable")
        for i, s in enumerate(self.stages):
            if s.kind == "llm" and not s.models:
                raise ConfigError(f"template.stages[{i}].models", "configurable stage needs admissible models")
            if s.kind not in ("llm", "tool"):
                raise ConfigError(f"template.stages[{i}].kind", f"unknown kind {s.kind!r}")

    @property
    def configurable(self) -> list[StageFamily]:
        return [s for s in self.stages if s.kind == "llm"]

    def family_at(self, depth: int) -> StageFamily:
        fams = self.configurable
        return fams[min(depth, len(fams)) - 1]

    def family_binding(self) -> list[str]:
        """Stage-family id per depth 1..max_depth."""
        return [self.family_at(d).id for d in range(1, self.max_depth + 1)]

    def admissible(self, depth: int) -> tuple[str, ...]:
        return self.family_at(depth).models

    def tool_overhead(self, depth: int) -> tuple[float, float]:
        """(latency, cost) of the tool stages that follow the invocation at ``depth``."""
        fam = self.family_at(depth)
        pos = self.stages.index(fam)
        lat = cost = 0.0
        for s in self.stages[pos + 1:]:
            if s.kind == "llm":
                break
            lat += s.latency
            cost += s.cost
        return lat, cost

    def validate_against(self, catalog: ModelCatalog) -> None:
        known = set(catalog.ids)
        for i, s in enumerate(self.stages):
            for j, m in enumerate(s.models):
                if m not in known:
                    raise ConfigError(f"template.stages[{i}].models[{j}]", f"unknown model id {m!r}")

    def to_dict(self) -> dict:
        stages = []
        for s in self.stages:
            if s.kind == "llm":
                stages.append({"id": s.id, "kind": "llm", "models": list(s.models)})
            else:
                stages.append({"id": s.id, "kind": "tool", "latency": s.latency, "cost": s.cost})
        return {"stages": stages, "max_depth": self.max_depth,
                "terminal_depths": sorted(self.terminal_depths)}

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowTemplate":
        stages = tuple(
            StageFamily(id=s["id"], kind=s["kind"], models=tuple(s.get("models", ())),
                        latency=float(s.get("latency", 0.0)), cost=float(s.get("cost", 0.0)))
            for s in d["stages"]
        )
        return cls(stages, int(d["max_depth"]), frozenset(d.get("terminal_depths", ())))


def canonical_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_NOISE = {
    "type": "object",
    "properties": {"kind": {"enum": ["none", "lognormal"]}, "sigma": {"type": "number", "minimum": 0}},
    "required": ["kind"],
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["catalog", "template", "world"],
    "properties": {
        "version": {"const": 1},
        "seed": {"type": "integer"},
        "catalog": {
            "type": "object",
            "required": ["engines", "models"],
            "properties": {
                "engines": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "models": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["id", "cost", "latency_mean", "engine"],
                        "properties": {
                            "id": {"type": "string", "pattern": "^[^/]+$"},
                            "cost": {"type": "number", "exclusiveMinimum": 0},
                            "latency_mean": {"type": "number", "exclusiveMinimum": 0},
                            "latency_noise": _NOISE,
                            "cost_sigma": {"type": "number", "minimum": 0},
                            "engine": {"type": "string"},
                        },
                    },
                },
            },
        },
        "template": {
            "type": "object",
            "required": ["stages", "max_depth"],
            "properties": {
                "max_depth": {"type": "integer", "minimum": 1},
                "terminal_depths": {"type": "array", "items": {"type": "integer"}},
                "stages": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["id", "kind"],
                        "properties": {
                            "id": {"type": "string"},
                            "kind": {"enum": ["llm", "tool"]},
                            "models": {"type": "array", "items": {"type": "string"}},
                            "latency": {"type": "number", "minimum": 0},
                            "cost": {"type": "number", "minimum": 0},
                        },
                    },
                },
            },
        },
        "world": {
            "type": "object",
            "required": ["n_requests", "law"],
            "properties": {
                "n_requests": {"type": "integer"},
                "difficulty": {
                    "type": "object",
                    "properties": {"kind": {"enum": ["none", "normal"]},
                                   "mean": {"type": "number"}, "sd": {"type": "number", "minimum": 0}},
                },
                "law": {"type": "object", "required": ["kind"],
                        "properties": {"kind": {"enum": ["table", "logistic"]}}},
                "overrides": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
    },
}


def _json_path(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def validate_config(doc: dict) -> None:
    """Schema plus cross-reference checks; raises ConfigError naming the field."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(_json_path(exc.absolute_path), exc.message) from None
    catalog = ModelCatalog.from_dict(doc["catalog"])
    template = WorkflowTemplate.from_dict(doc["template"])
    template.validate_against(catalog)


def load_config(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    validate_config(doc)
    return doc
