import json

import pytest

from triectl.catalog import (ConfigError, ModelCatalog, ModelSpec, StageFamily, WorkflowTemplate,
                             canonical_hash, load_config, validate_config)
from triectl.reference import gen_repair_template, reference_config


def test_duplicate_model_ids_rejected():
    with pytest.raises(ConfigError) as exc:
        ModelCatalog((ModelSpec("a", 1, 1, "e"), ModelSpec("a", 2, 1, "e")), ("e",))
    assert exc.value.field == "catalog.models"


def test_nonpositive_cost_names_field():
    with pytest.raises(ConfigError) as exc:
        ModelCatalog((ModelSpec("a", 0.0, 1, "e"),), ("e",))
    assert exc.value.field == "catalog.models[0].cost"


def test_unknown_engine():
    with pytest.raises(ConfigError, match="engine"):
        ModelCatalog((ModelSpec("a", 1, 1, "nope"),), ("e",))


def test_terminal_depths_must_include_max():
    with pytest.raises(ConfigError):
        WorkflowTemplate((StageFamily("g", "llm", ("a",)),), 2, frozenset({1}))


def test_terminal_depth_out_of_range():
    with pytest.raises(ConfigError):
        gen_repair_template(("a",), 2, (3,))


def test_family_binding_gen_then_repair():
    t = gen_repair_template(("a", "b"), 4)
    assert t.family_binding() == ["generate", "repair", "repair", "repair"]
    assert t.admissible(3) == ("a", "b")


def test_template_unknown_model_names_field():
    cat = ModelCatalog((ModelSpec("a", 1, 1, "e"),), ("e",))
    with pytest.raises(ConfigError) as exc:
        gen_repair_template(("a", "zz"), 2).validate_against(cat)
    assert "models[1]" in exc.value.field


def test_validate_config_names_bad_reference():
    doc = reference_config()
    doc["template"]["stages"][0]["models"][0] = "ghost"
    with pytest.raises(ConfigError, match="ghost"):
        validate_config(doc)


def test_validate_config_schema_error_has_path():
    doc = reference_config()
    doc["catalog"]["models"][2]["cost"] = "cheap"
    with pytest.raises(ConfigError) as exc:
        validate_config(doc)
    assert exc.value.field.startswith("catalog.models")


def test_load_config_roundtrip(tmp_path):
    doc = reference_config()
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert load_config(p) == doc


def test_template_dict_roundtrip():
    t = gen_repair_template(("a", "b"), 3, (1, 3))
    assert WorkflowTemplate.from_dict(t.to_dict()) == t


def test_canonical_hash_ignores_key_order():
    assert canonical_hash({"a": 1, "b": [1, 2]}) == canonical_hash({"b": [1, 2], "a": 1})
    assert canonical_hash({"a": 1}) != canonical_hash({"a": 2})
