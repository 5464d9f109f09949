import numpy as np
import pytest

from triectl.estimators import (METHODS, ColumnMeanEstimate, als_complete, build_conditional_matrix, error_report,
                                estimate, estimate_cascade_lite, estimate_cascade_smoothed, estimate_direct_average,
                                estimate_prefix_avg, rank1_project, write_error_csv)
from triectl.profiler import DIRECT, FILLED, FilledTable, ObservationSet, cascade_sample, subtree_fill_in
from triectl.reference import TWO_MODEL_ANNOTATIONS, gen_repair_template, uniform_catalog
from triectl.workload import WorldConfig, generate_world, true_column_means


def _obs(trie, n, cells):
    """ObservationSet from (prefix, request, outcome) triples."""
    node = np.array([trie.index[p] for p, _, _ in cells], dtype=np.int64)
    req = np.array([q for _, q, _ in cells], dtype=np.int64)
    out = np.array([o for _, _, o in cells], dtype=np.int8)
    return ObservationSet(trie, n, node, req, out, np.ones(len(cells)), np.ones(len(cells)))


def test_direct_average_arithmetic(gs_trie):
    obs = _obs(gs_trie, 4, [(("G",), q, o) for q, o in enumerate([1, 1, 0, 1])])
    assert estimate_direct_average(obs)[("G",)] == 0.75


def test_prefix_avg_counts_fill_in(gs_trie):
    vals = np.full((len(gs_trie), 4), -1, dtype=np.int8)
    prov = np.zeros_like(vals)
    i = gs_trie.index[("G", "S")]
    vals[i] = [1, 1, 1, 0]
    prov[i] = [FILLED, FILLED, FILLED, DIRECT]
    f = FilledTable(gs_trie, vals, prov)
    assert estimate_prefix_avg(f)[("G", "S")] == 0.75
    assert estimate_direct_average(f)[("G", "S")] == 0.0


def test_fully_observed_table_is_exact(ref_world):
    truth = true_column_means(ref_world)
    table = FilledTable(ref_world.trie, ref_world.success.astype(np.int8),
                        np.full(ref_world.success.shape, DIRECT, dtype=np.int8))
    for est in (estimate_direct_average(table), estimate_prefix_avg(table)):
        assert error_report(est, truth).overall.max_abs < 1e-12


def test_exhaustive_observations_exact_for_cascade_methods(ref_world):
    truth = true_column_means(ref_world)
    ex = ObservationSet.from_world_exhaustive(ref_world)
    for m in ("prefix_avg", "impute", "lite"):
        assert error_report(estimate(m, ex), truth).overall.max_abs < 1e-9, m


def test_als_rank_one_completion():
    # [[0.2, 0.4], [0.3, ?]] has the unique rank-1 completion 0.4 * 0.3 / 0.2
    Y = np.array([[0.2, 0.4], [0.3, 0.0]])
    mask = np.array([[True, True], [True, False]])
    R, resid = als_complete(Y, mask, rank=1, n_iter=2000, ridge=1e-12)
    assert R[1, 1] == pytest.approx(0.6, abs=1e-6)
    assert resid < 1e-6


def test_conditional_matrix_cells(gs_trie):
    obs = _obs(gs_trie, 4, [(("G",), 0, 0), (("G",), 1, 0), (("G", "S"), 0, 1), (("G", "S"), 1, 0)])
    Q = build_conditional_matrix(obs)
    assert Q.cell(("G",), "S") == 0.5
    r = int(np.nonzero(Q.rows == gs_trie.index[("G",)])[0][0])
    assert Q.counts[r, Q.models.index("S")] == 2
    assert np.isnan(Q.cell(("G",), "G"))
    assert not Q.mask[r, Q.models.index("G")]


def test_cascade_recursion_arithmetic(gs_trie):
    # mu(G) = 0.6 over 10 requests; the 4 that failed see S succeed half the time
    cells = [(("G",), q, int(q < 6)) for q in range(10)]
    cells += [(("G", "S"), q, int(q < 8)) for q in range(6, 10)]
    cells += [(("S",), 0, 1), (("G", "G"), 6, 0), (("S", "G"), 0, 0), (("S", "S"), 0, 0)]
    est = estimate_cascade_lite(_obs(gs_trie, 10, cells))
    assert est[("G", "S")] == pytest.approx(0.8, abs=1e-12)
    assert est[("S",)] == 1.0 and est[("S", "G")] == 1.0


def test_worked_example_inversion(gs_world):
    est = estimate("lite", ObservationSet.from_world_exhaustive(gs_world))
    for p, (acc, _, _) in TWO_MODEL_ANNOTATIONS.items():
        assert abs(est[p] - acc) <= 0.01


def test_rank1_fixed_point():
    B = np.outer([0.2, 0.5, 0.9], [0.3, 0.6, 1.0, 0.8])
    res = rank1_project(B)
    assert np.max(np.abs(res.block - B)) < 1e-6 and res.converged


def test_rank1_recovers_masked_cell():
    B = np.outer([0.2, 0.5, 0.9], [0.3, 0.6, 1.0, 0.8])
    X = B.copy()
    X[1, 2] = np.nan
    res = rank1_project(X)
    assert res.block[1, 2] == pytest.approx(B[1, 2], abs=1e-6)


def test_rank1_of_rank2_block_is_svd_truncation():
    B = np.array([[0.9, 0.1, 0.4], [0.2, 0.8, 0.5], [0.6, 0.3, 0.7]])
    u, s, vt = np.linalg.svd(B)
    res = rank1_project(B, clip=False)
    assert np.allclose(res.block, s[0] * np.outer(u[:, 0], vt[0]), atol=1e-6)
    assert np.linalg.norm(B - res.block, 2) == pytest.approx(s[1], abs=1e-6)


def test_rank1_all_missing_column_flagged():
    X = np.array([[0.2, np.nan], [0.4, np.nan]])
    res = rank1_project(X)
    assert res.flagged_columns == [1]
    assert np.isfinite(res.block).all()


def _binary_rank1_world():
    cat = uniform_catalog(2)
    rows = {"M0/M0": 1, "M0/M1": 1, "M1/M0": 0, "M1/M1": 1}
    cols = {"M0": 1, "M1": 0}
    cond = {f"{r}/{c}": float(rows[r] * cols[c]) for r in rows for c in cols}
    return generate_world(gen_repair_template(cat.ids, 3), cat,
                          WorldConfig(40, {"kind": "table", "conditional": cond}), 0)


def test_smoothed_equals_lite_on_exact_rank1():
    w = _binary_rank1_world()
    ex = ObservationSet.from_world_exhaustive(w)
    a, b = estimate_cascade_lite(ex), estimate_cascade_smoothed(ex)
    assert np.max(np.abs(a.mu - b.mu)) < 1e-6


def test_error_report_zero_and_shift(ref_world, tmp_path):
    truth = true_column_means(ref_world)
    exact = {p: t.acc for p, t in truth.items()}
    r0 = error_report(exact, truth)
    assert r0.overall.max_abs == 0 and r0.overall.mean_signed == 0
    r1 = error_report({p: v + 0.01 for p, v in exact.items()}, truth)
    for st in [r1.overall, *r1.by_depth.values()]:
        assert st.mean_signed == pytest.approx(0.01)
        assert st.mean_abs == pytest.approx(0.01)
        assert st.max_abs == pytest.approx(0.01)
    write_error_csv([r1], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "method,depth,mean_signed,mean_abs,max_abs,n_columns"


def test_unknown_method(ref_world):
    obs = cascade_sample(ref_world, coverage=0.01, seed=0)
    with pytest.raises(ValueError, match="unknown method"):
        estimate("magic", obs)


def test_bias_signs_on_reference_world(ref_world):
    truth = true_column_means(ref_world)
    obs = cascade_sample(ref_world, coverage=0.02, seed=1)
    f = subtree_fill_in(obs)
    r = {m: error_report(estimate(m, obs, filled=f), truth) for m in METHODS}
    assert r["direct"].by_depth[3].mean_signed < -0.05
    assert r["prefix_avg"].by_depth[3].mean_signed > 0.02
    assert r["prefix_avg"].overall.mean_abs > r["impute"].overall.mean_abs > r["lite"].overall.mean_abs


def test_estimates_are_probabilities(ref_world):
    obs = cascade_sample(ref_world, coverage=0.02, seed=1)
    for m in METHODS:
        est = estimate(m, obs)
        assert isinstance(est, ColumnMeanEstimate)
        assert est.mu.min() >= 0 and est.mu.max() <= 1
