import numpy as np
import pytest

from triectl.profiler import (DIRECT, FILLED, ObservationSet, cascade_sample, checkpoint_cost_accounting,
                              cost_ledger, coverage_stats, subtree_fill_in)
from triectl.reference import gen_repair_template, reference_world, uniform_catalog
from triectl.workload import WorldConfig, generate_world


def _binary_world(cond=None, n=20):
    cat = uniform_catalog(2)
    tmpl = gen_repair_template(cat.ids, 4)
    return generate_world(tmpl, cat, WorldConfig(n, {"kind": "table", "conditional": cond or {}}), 0)


def test_depth_one_always_succeeds_stops_cascade():
    w = _binary_world({"M0": 1.0, "M1": 1.0})
    obs = cascade_sample(w, runs=500, seed=1)
    assert len(obs) > 0
    assert set(w.trie.depth[obs.node]) == {1}


def test_entries_are_reachable_and_unique(ref_world):
    obs = cascade_sample(ref_world, coverage=0.02, seed=4)
    parent = ref_world.trie.parent
    par = parent[obs.node]
    assert not ref_world.success[par, obs.request].any()
    keys = obs.node * ref_world.n + obs.request
    assert len(np.unique(keys)) == len(keys)
    assert np.array_equal(obs.outcome, ref_world.outcome[obs.node, obs.request])


def test_revisits_are_free():
    w = _binary_world(n=1)
    obs = cascade_sample(w, runs=5000, seed=0)
    # one request, 30 cells: thousands of runs can only invoke each cell once
    assert obs.runs == 5000 and obs.invocations == 30


def test_sampling_is_deterministic(ref_world):
    a = cascade_sample(ref_world, coverage=0.01, seed=9)
    b = cascade_sample(ref_world, coverage=0.01, seed=9)
    assert np.array_equal(a.node, b.node) and np.array_equal(a.request, b.request)


def test_budget_arguments_validated(ref_world):
    with pytest.raises(ValueError):
        cascade_sample(ref_world, coverage=0.0)
    with pytest.raises(ValueError):
        cascade_sample(ref_world)
    with pytest.raises(ValueError):
        cascade_sample(ref_world, coverage=0.1, runs=10)


def test_sparse_dollars_within_budget(ref_world):
    obs = cascade_sample(ref_world, coverage=0.02, seed=2)
    full = checkpoint_cost_accounting(ref_world, "checkpointed_full").dollars
    one_run = ref_world.stage_cost.max() * ref_world.template.max_depth
    assert obs.spent <= 0.02 * full
    assert obs.spent >= 0.02 * full - one_run


def test_full_coverage_reaches_every_reachable_cell():
    w = reference_world(seed=1, n_requests=120)
    obs = cascade_sample(w, coverage=1.0, seed=0)
    reach = checkpoint_cost_accounting(w, "checkpointed_full", truncated=True)
    assert obs.invocations == reach.invocations
    assert obs.spent == pytest.approx(reach.dollars, abs=1e-6)


def test_fill_in_success_fills_subtree():
    w = _binary_world({"M0": 1.0})
    obs = ObservationSet(w.trie, w.n, np.array([w.trie.index[("M0",)]]), np.array([3]),
                         np.array([1], dtype=np.int8), np.array([1.0]), np.array([1.0]))
    f = subtree_fill_in(obs)
    i = w.trie.index[("M0",)]
    block = f.values[i:i + w.trie.size[i], 3]
    assert (block == 1).all() and len(block) == 1 + 2 + 4 + 8
    assert (f.provenance[i + 1:i + w.trie.size[i], 3] == FILLED).all()
    assert f.provenance[i, 3] == DIRECT
    assert (f.values[:, 2] == -1).all()


def test_failure_chain_records_zero_and_leaves_siblings():
    w = _binary_world()
    path = [("M0",), ("M0", "M1"), ("M0", "M1", "M1")]
    nodes = np.array([w.trie.index[p] for p in path])
    obs = ObservationSet(w.trie, w.n, nodes, np.zeros(3, dtype=np.int64), np.zeros(3, dtype=np.int8),
                         np.ones(3), np.ones(3))
    f = subtree_fill_in(obs)
    assert f.column(("M0", "M1", "M1"))[0] == 0
    assert f.column(("M0", "M1", "M0"))[0] == -1
    assert f.column(("M0", "M0"))[0] == -1


def test_fill_in_matches_truth(ref_world):
    obs = cascade_sample(ref_world, coverage=0.05, seed=0)
    f = subtree_fill_in(obs)
    m = f.mask
    assert np.array_equal(f.values[m], ref_world.success[m].astype(np.int8))


def test_binary_depth_four_closed_form():
    w = _binary_world(n=1)
    naive = checkpoint_cost_accounting(w, "naive_full")
    ck = checkpoint_cost_accounting(w, "checkpointed_full")
    assert naive.invocations == sum(t * 2 ** t for t in range(1, 5)) == 98
    assert ck.invocations == 30
    assert naive.dollars / ck.dollars == pytest.approx(98 / 30)


def test_ledger_ordering_and_csv(tmp_path, ref_world):
    obs = cascade_sample(ref_world, coverage=0.02, seed=0)
    for truncated in (False, True):
        led = cost_ledger(ref_world, obs, truncated=truncated)
        d = [led[r].dollars for r in ("sparse", "checkpointed_full", "naive_full")]
        assert d[0] <= d[1] <= d[2]
    led.write_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "regime,invocations,dollars,ratio"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["sparse", "checkpointed_full", "naive_full"]
    assert lines[-1].endswith(",1.0000")


def test_unknown_regime(ref_world):
    with pytest.raises(ValueError):
        checkpoint_cost_accounting(ref_world, "bogus")


def test_coverage_empty_and_full(ref_world):
    empty = ObservationSet(ref_world.trie, ref_world.n, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                           np.zeros(0, dtype=np.int8), np.zeros(0), np.zeros(0))
    st = coverage_stats(empty)
    assert all(v == 0 for v in st.cell_fraction.values())
    full = subtree_fill_in(ObservationSet.from_world_exhaustive(ref_world))
    st = coverage_stats(full)
    assert all(v == 1 for v in st.cell_fraction.values())
    assert all(v == 1 for v in st.column_fraction.values())


def test_depth_three_column_histogram(ref_world):
    obs = cascade_sample(ref_world, coverage=0.05, seed=0)
    st = coverage_stats(obs)
    counts, _ = st.histogram(ref_world.trie, 3, [0, 5, 121, 10 ** 9])
    assert counts[1] / counts.sum() >= 0.5


def test_observation_roundtrip(tmp_path, ref_world):
    obs = cascade_sample(ref_world, coverage=0.01, seed=0)
    obs.save(tmp_path / "o.jsonl")
    back = ObservationSet.load(tmp_path / "o.jsonl", ref_world.trie, ref_world.n)
    for a in ("node", "request", "outcome", "cost", "latency"):
        assert np.array_equal(getattr(obs, a), getattr(back, a))
