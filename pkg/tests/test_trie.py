import json

import numpy as np
import pytest

from triectl.reference import TWO_MODEL_ANNOTATIONS, two_model_trie, gen_repair_template, shape_template, uniform_catalog
from triectl.trie import (Annotation, AnnotationFileError, annotate_from_traces, build_trie, check_monotonicity,
                          load_annotations, parse_prefix, prefix_key, reroot, save_annotations)
from triectl.workload import oracle_trie, realize_run, true_column_means


@pytest.mark.parametrize("k,d,n", [(8, 3, 584), (2, 4, 30), (4, 6, 5460), (3, 2, 12)])
def test_full_template_node_count(k, d, n):
    tmpl, cat = shape_template(k, d)
    trie = build_trie(tmpl, cat)
    assert len(trie.terminating()) == n == sum(k ** t for t in range(1, d + 1))


def test_single_model_depth_one():
    cat = uniform_catalog(1)
    trie = build_trie(gen_repair_template(cat.ids, 1), cat)
    assert len(trie) == 2 and list(trie.root.children) == ["M0"]


def test_preorder_subtree_ranges_are_contiguous():
    tmpl, cat = shape_template(3, 3)
    trie = build_trie(tmpl, cat)
    for node in trie.nodes:
        block = trie.nodes[node.index:node.index + trie.size[node.index]]
        assert all(n.prefix[:len(node.prefix)] == node.prefix for n in block)
    assert [n.prefix for n in trie.nodes] == sorted(n.prefix for n in trie.nodes)


def test_child_table_matches_children():
    tmpl, cat = shape_template(2, 3)
    trie = build_trie(tmpl, cat)
    for node in trie.nodes:
        for k, m in enumerate(cat.ids):
            c = trie.child_table[node.index, k]
            if m in node.children:
                assert c == node.children[m].index
            else:
                assert c == -1


def test_terminal_depths_respected():
    trie = two_model_trie(terminal_depths=(2,))
    assert not trie.node(("G",)).terminal_eligible
    assert trie.node(("G", "S")).terminal_eligible


def test_prefix_key_roundtrip():
    assert parse_prefix(prefix_key(("a", "b"))) == ("a", "b")
    assert parse_prefix("") == ()


def test_reroot_identity_and_subtree(gs_trie):
    v = reroot(gs_trie, ())
    assert len(v) == len(gs_trie)
    g = reroot(gs_trie, ("G",))
    assert set(g.prefixes()) == {("G",), ("G", "G"), ("G", "S")}
    leaf = reroot(gs_trie, ("S", "S"))
    assert leaf.prefixes() == [("S", "S")] and leaf.root.terminal_eligible


def test_reroot_composes():
    tmpl, cat = shape_template(3, 3)
    trie = build_trie(tmpl, cat)
    assert reroot(reroot(trie, ("M1",)), ("M2",)).prefixes() == reroot(trie, ("M1", "M2")).prefixes()


def test_reroot_outside_view_raises(gs_trie):
    with pytest.raises(KeyError):
        reroot(gs_trie, ("G",)).node(("S",))


def test_monotonicity_seeded_defect(gs_trie):
    ann = gs_trie.annotations()
    ann[("G", "S")] = Annotation(0.5, 11.0, 4.8)
    v = check_monotonicity(gs_trie.with_annotations(ann))
    assert len(v) == 1
    assert v[0].parent == ("G",) and v[0].child == ("G", "S") and v[0].metric == "acc"


def test_two_model_annotations_monotone(gs_trie):
    assert check_monotonicity(gs_trie) == []


def test_oracle_w2_monotone(gs_world):
    assert check_monotonicity(oracle_trie(gs_world)) == []


def test_save_load_roundtrip(tmp_path, gs_trie):
    p = tmp_path / "a.json"
    save_annotations(gs_trie, p)
    back = load_annotations(p, gs_trie.template, gs_trie.catalog)
    assert back.annotations() == gs_trie.annotations()
    assert [n.prefix for n in back.nodes] == [n.prefix for n in gs_trie.nodes]


def test_load_rejects_unknown_prefix(tmp_path, gs_trie):
    p = tmp_path / "a.json"
    save_annotations(gs_trie, p)
    doc = json.loads(p.read_text())
    doc["annotations"]["G/X"] = doc["annotations"]["G/S"]
    p.write_text(json.dumps(doc))
    with pytest.raises(AnnotationFileError, match="G/X"):
        load_annotations(p, gs_trie.template, gs_trie.catalog)


def test_load_partial_leaves_nodes_unannotated(tmp_path, ref_world):
    trie = oracle_trie(ref_world)
    p = tmp_path / "a.json"
    save_annotations(trie, p)
    doc = json.loads(p.read_text())
    doc["annotations"] = {k: v for k, v in doc["annotations"].items() if k.count("/") < 2}
    p.write_text(json.dumps(doc))
    back = load_annotations(p, trie.template, trie.catalog)
    assert back.node(("M1", "M2", "M3")).annotation is None
    assert back.node(("M1", "M2")).annotation == trie.node(("M1", "M2")).annotation


def test_load_hash_mismatch_needs_force(tmp_path, gs_trie):
    p = tmp_path / "a.json"
    save_annotations(gs_trie, p)
    other = gen_repair_template(("G", "S"), 2, (2,))
    with pytest.raises(AnnotationFileError, match="hash"):
        load_annotations(p, other, gs_trie.catalog)
    assert load_annotations(p, other, gs_trie.catalog, force=True).node(("G",)).annotation is not None


def test_load_rejects_malformed_number(tmp_path, gs_trie):
    p = tmp_path / "a.json"
    save_annotations(gs_trie, p)
    doc = json.loads(p.read_text())
    doc["annotations"]["G"]["acc"] = "high"
    p.write_text(json.dumps(doc))
    with pytest.raises(AnnotationFileError, match="acc"):
        load_annotations(p, gs_trie.template, gs_trie.catalog)


def _all_traces(world):
    leaves = [n.prefix for n in world.trie.nodes if n.depth == world.template.max_depth]
    return [realize_run(world, q, p) for p in leaves for q in range(world.n)]


def test_annotate_from_traces_equals_oracle(gs_world):
    trie = annotate_from_traces(gs_world.trie, _all_traces(gs_world))
    truth = true_column_means(gs_world)
    for p, t in truth.items():
        a = trie.node(p).annotation
        assert a.acc == pytest.approx(t.acc, abs=1e-12)
        assert a.cost == pytest.approx(t.cost, abs=1e-9)
        assert a.lat == pytest.approx(t.lat, abs=1e-9)


def test_traces_reproduce_worked_example_accuracies(gs_world):
    trie = annotate_from_traces(gs_world.trie, _all_traces(gs_world))
    for p, (acc, _, _) in TWO_MODEL_ANNOTATIONS.items():
        assert abs(trie.node(p).annotation.acc - acc) <= 0.01


def test_single_success_trace_propagates():
    trie = two_model_trie()
    from triectl.workload import TraceRecord
    tr = TraceRecord(0, ("G", "S"), (True, False), (1.0, 0.0), (1.0, 0.0), True, 1)
    out = annotate_from_traces(trie.with_annotations({}), [tr])
    assert out.node(("G",)).annotation.acc == 1.0
    assert out.node(("G", "S")).annotation.acc == 1.0
    assert out.node(("G", "S")).annotation.cost == 1.0


def test_candidate_bounds_against_brute_force():
    from triectl.reference import random_annotated_trie
    rng = np.random.default_rng(5)
    trie = random_annotated_trie(rng, 3, 3, monotone=False)
    cmin, lmin, amax = trie.candidate_bounds
    acc, cost, lat = trie.metric_arrays
    for node in trie.nodes:
        sub = [n.index for n in trie.nodes[node.index:node.index + trie.size[node.index]]
               if n.terminal_eligible and n.annotation is not None]
        if sub:
            assert cmin[node.index] == min(cost[sub])
            assert lmin[node.index] == min(lat[sub])
            assert amax[node.index] == max(acc[sub])
