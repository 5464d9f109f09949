import csv
import json
from pathlib import Path

import pytest

from triectl.cli import main
from triectl.reference import reference_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(reference_config(seed=2, n_requests=200)))
    return p


def test_gen_world_w2(tmp_path):
    assert run("gen-world", "--config", CONFIGS / "w2.json", "--out", tmp_path / "a") == 0
    cols = rows(tmp_path / "a" / "columns.csv")
    assert len(cols) == 6 and all(0 <= float(r["mu"]) <= 1 for r in cols)
    assert run("gen-world", "--config", CONFIGS / "w2.json", "--out", tmp_path / "b") == 0
    for f in ("columns.csv", "summary.json", "frontier.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["subcommand"] == "gen-world" and man["seed"] == 7 and "columns.csv" in man["outputs"]


def test_gen_world_bad_reference(tmp_path, capsys):
    doc = json.loads((CONFIGS / "w2.json").read_text())
    doc["template"]["stages"][1]["models"][0] = "Q"
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert run("gen-world", "--config", p, "--out", tmp_path / "o") == 1
    assert "template.stages[1].models[0]" in capsys.readouterr().err


def test_profile_ledger_and_usage(tmp_path, small_config):
    assert run("profile", "--config", small_config, "--coverage", "0", "--out", tmp_path / "z") == 2
    assert run("profile", "--config", small_config, "--out", tmp_path / "z") == 2
    assert run("profile", "--config", small_config, "--coverage", "0.02", "--out", tmp_path / "p") == 0
    led = rows(tmp_path / "p" / "ledger.csv")
    assert [r["regime"] for r in led] == ["sparse", "checkpointed_full", "naive_full"]
    assert float(led[0]["dollars"]) <= float(led[1]["dollars"]) <= float(led[2]["dollars"])
    assert len(rows(tmp_path / "p" / "coverage.csv")) == 3


def test_estimate_methods(tmp_path, small_config):
    run("profile", "--config", small_config, "--coverage", "0.05", "--out", tmp_path / "p")
    obs = tmp_path / "p" / "observations.jsonl"
    for m in ("direct", "prefix_avg", "impute", "lite", "smoothed"):
        assert run("estimate", "--config", small_config, "--obs", obs, "--method", m, "--out", tmp_path / m) == 0
        assert rows(tmp_path / m / "errors.csv")[0]["method"] == m
    assert run("estimate", "--config", small_config, "--obs", obs, "--method", "nope", "--out", tmp_path / "x") == 2


@pytest.mark.parametrize("objective,path", [("min_cost:acc>=0.90", "G/S"), ("max_acc:cost<=11", "G/S"),
                                            ("max_acc:lat<=4.9", "G/S"), ("max_acc:lat<=7.0", "S/S")])
def test_plan_worked_examples(tmp_path, objective, path):
    code = run("plan", "--config", CONFIGS / "two_model.json", "--annotations", CONFIGS / "two_model_annotations.json",
               "--objective", objective, "--out", tmp_path)
    assert code == 0 and rows(tmp_path / "plan.csv")[0]["path"] == path


def test_plan_errors(tmp_path, capsys):
    base = ["plan", "--config", CONFIGS / "two_model.json", "--annotations", CONFIGS / "two_model_annotations.json",
            "--out", tmp_path]
    assert run(*base, "--objective", "cheapest please") == 2
    assert "goal" in capsys.readouterr().err
    assert run(*base, "--objective", "min_cost:acc>=1.01") == 1
    assert rows(tmp_path / "plan.csv")[0]["path"] == "INFEASIBLE"
    assert "infeasible" in capsys.readouterr().err


def _scenario(tmp_path, small_config, name, lat_base):
    doc = {"name": name, "world_config": str(small_config), "objective": "max_acc:lat<=100",
           "slo": {"kind": "oracle_plan", "base": lat_base}, "noise": {"kind": "lognormal", "sigma": 0.6},
           "requests": {"count": 100, "seed": 0, "replace": False}, "policies": ["static", "dynamic"]}
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(doc))
    return p


def test_simulate_and_report(tmp_path, small_config):
    outs = []
    for i, base in enumerate(["max_acc:cost<=2", "max_acc:cost<=3", "max_acc:cost<=4"]):
        sc = _scenario(tmp_path, small_config, f"s{i}", base)
        assert run("simulate", "--scenario", sc, "--out", tmp_path / f"o{i}") == 0
        outs.append(tmp_path / f"o{i}")
    assert run("simulate", "--scenario", tmp_path / "s0.json", "--out", tmp_path / "again") == 0
    for f in ("report.csv", "summary.csv"):
        assert (outs[0] / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
    assert run("report", "--kind", "violation", "--inputs", *outs, "--out", tmp_path / "r") == 0
    merged = rows(tmp_path / "r" / "violation.csv")
    assert len(merged) == 6
    assert len({(r["lat_cap"], r["policy"]) for r in merged}) == 6
    assert all(r["hash_mismatch"] == "0" for r in merged)
    assert run("report", "--kind", "violation", "--out", tmp_path / "r2") == 2


def test_report_flags_hash_mismatch(tmp_path, small_config):
    a = _scenario(tmp_path, small_config, "a", "max_acc:cost<=3")
    doc = json.loads(a.read_text())
    doc["noise"] = {"kind": "none"}
    b = tmp_path / "b.json"
    b.write_text(json.dumps(doc))
    run("simulate", "--scenario", a, "--out", tmp_path / "oa")
    run("simulate", "--scenario", b, "--out", tmp_path / "ob")
    run("report", "--kind", "violation", "--inputs", tmp_path / "oa", tmp_path / "ob", "--out", tmp_path / "r")
    assert all(r["hash_mismatch"] == "1" for r in rows(tmp_path / "r" / "violation.csv"))


def test_report_frontier_and_delta(tmp_path, small_config):
    run("profile", "--config", small_config, "--coverage", "0.05", "--out", tmp_path / "p")
    run("estimate", "--config", small_config, "--obs", tmp_path / "p" / "observations.jsonl", "--method", "lite",
        "--out", tmp_path / "lite")
    ann = tmp_path / "lite" / "annotations.json"
    assert run("report", "--kind", "frontier", "--config", small_config, "--inputs", ann,
               "--bounds", "1", "2", "--out", tmp_path / "f") == 0
    assert {r["annotations"] for r in rows(tmp_path / "f" / "frontier.csv")} == {"oracle", "lite"}
    assert run("report", "--kind", "delta", "--config", small_config, "--inputs", ann,
               "--bounds", "1", "2", "--out", tmp_path / "d") == 0
    assert len(rows(tmp_path / "d" / "delta.csv")) == 4
    assert run("report", "--kind", "delta", "--inputs", ann, "--out", tmp_path / "e") == 2


def test_fit_load(tmp_path):
    assert run("fit-load", "--samples", ROOT / "scenarios" / "load_samples.csv", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "load_model.json").read_text())
    assert doc["mode"] == "slowdown" and len(doc["engines"]) == 8
    committed = json.loads((ROOT / "scenarios" / "load_model.json").read_text())
    assert doc == committed


def test_exactly_one_manifest(tmp_path):
    run("plan", "--config", CONFIGS / "two_model.json", "--annotations", CONFIGS / "two_model_annotations.json",
        "--objective", "max_acc:lat<=7", "--out", tmp_path)
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith("manifest")] == ["manifest.json"]
