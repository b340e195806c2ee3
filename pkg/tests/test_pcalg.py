from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aggcausal.citest import VariableView
from aggcausal.pcalg import (
    PDAG,
    CausalDataset,
    FeatureRanking,
    bootstrap_rank,
    meek_orient,
    orient_v_structures,
    pc,
    pc_skeleton,
    pc_two_stage,
    select_features,
)
from aggcausal.synth import cpdag, dsep_oracle, random_dag, shd


def dag(nodes, edges):
    return PDAG(nodes, directed=edges)


def test_skeleton_chain():
    g = pc_skeleton(dsep_oracle(dag("XYZ", [("X", "Y"), ("Y", "Z")])), list("XYZ"))
    assert g.undirected_edges == {frozenset("XY"), frozenset("YZ")}
    assert g.sepsets[frozenset("XZ")] == ("Y",)


def test_skeleton_collider():
    g = pc_skeleton(dsep_oracle(dag("XYZ", [("X", "Y"), ("Z", "Y")])), list("XYZ"))
    assert g.undirected_edges == {frozenset("XY"), frozenset("YZ")}
    assert g.sepsets[frozenset("XZ")] == ()


def test_skeleton_independent_nodes():
    g = pc_skeleton(lambda a, b, c=(): 1.0, list("ABCD"))
    assert g.n_edges() == 0


def test_orient_collider():
    sk = PDAG("XYZ", undirected=[("X", "Y"), ("Y", "Z")])
    g = orient_v_structures(sk, {frozenset("XZ"): ()})
    assert g.is_directed("X", "Y") and g.is_directed("Z", "Y")


def test_orient_chain_stays_undirected():
    sk = PDAG("XYZ", undirected=[("X", "Y"), ("Y", "Z")])
    g = orient_v_structures(sk, {frozenset("XZ"): ("Y",)})
    assert g.undirected_edges == {frozenset("XY"), frozenset("YZ")}


def test_orient_conflict_left_undirected():
    sk = PDAG("AXYB", undirected=[("A", "X"), ("X", "Y"), ("Y", "B")])
    seps = {frozenset("AY"): (), frozenset("XB"): (), frozenset("AB"): ()}
    g = orient_v_structures(sk, seps)
    assert g.is_undirected("X", "Y")
    assert g.is_directed("A", "X") and g.is_directed("B", "Y")
    assert g.conflicts == 1


def test_meek_r1():
    g = meek_orient(PDAG("abc", undirected=[("b", "c")], directed=[("a", "b")]))
    assert g.is_directed("b", "c")


def test_meek_r2():
    g = meek_orient(PDAG("abc", undirected=[("a", "c")], directed=[("a", "b"), ("b", "c")]))
    assert g.is_directed("a", "c")


def test_meek_fixpoint_on_chain():
    g = PDAG("XYZ", undirected=[("X", "Y"), ("Y", "Z")])
    assert meek_orient(g) == g


def test_pdag_cycle_detection():
    g = PDAG("abc", directed=[("a", "b"), ("b", "c")])
    assert not g.has_directed_cycle()
    g.add_directed("c", "a")
    assert g.has_directed_cycle()


def test_orient_requires_undirected_edge():
    with pytest.raises(ValueError):
        PDAG("ab", directed=[("a", "b")]).orient("b", "a")


def test_edge_list_roundtrip():
    g = PDAG("abcd", undirected=[("a", "b")], directed=[("b", "c"), ("d", "c")])
    assert PDAG.from_edge_list(g.to_edge_list()) == g


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 7), st.floats(0.1, 0.6))
def test_pc_with_exact_oracle_recovers_cpdag(seed, n, p):
    truth = random_dag(n, p, seed=seed)
    est = pc(dsep_oracle(truth), truth.nodes, max_depth=None)
    assert shd(est, truth) == 0
    assert not est.has_directed_cycle()


def test_two_stage_figure_style_parents():
    truth = dag(["W", "X", "R"], [("W", "X"), ("X", "R"), ("W", "R")])
    g = pc_two_stage(dsep_oracle(truth), ["W", "X"], "R")
    assert set(g.parents("R")) == {"W", "X"}


def test_two_stage_independent_response():
    truth = dag(["A", "B", "R"], [("A", "B")])
    g = pc_two_stage(dsep_oracle(truth), ["A", "B"], "R")
    assert g.adjacent("R") == []


def test_two_stage_confounder():
    truth = dag(["C", "X", "R"], [("C", "X"), ("C", "R")])
    g = pc_two_stage(dsep_oracle(truth), ["C", "X"], "R")
    assert set(g.parents("R")) == {"C"}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_two_stage_finds_response_parents_with_exact_oracle(seed):
    truth = random_dag(6, 0.3, seed=seed, names=["a", "b", "c", "d", "e", "R"])
    # make R a sink so it is a valid response
    edges = [(u, v) if v == "R" or u != "R" else (v, u) for u, v in truth.directed_edges]
    truth = dag(truth.nodes, edges)
    g = pc_two_stage(dsep_oracle(truth), list("abcde"), "R", max_depth=None)
    assert set(g.parents("R")) == set(truth.parents("R"))


def _toy_dataset(n=200, seed=0):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(3, n))
    y = np.sin(a) + 0.5 * r.normal(size=n)
    views = {"y": VariableView.scalar("y", y, "response")}
    for name, v in dict(a=a, b=b, c=c).items():
        views[name] = VariableView.scalar(name, v, "static")
    return CausalDataset(views, "y")


def test_bootstrap_single_run_scores_binary():
    r = bootstrap_rank(_toy_dataset(), B=1, seed=0)
    assert set(r.scores.values()) <= {0.0, 1.0}


def test_bootstrap_deterministic():
    ds = _toy_dataset()
    r1 = bootstrap_rank(ds, B=3, seed=5)
    r2 = bootstrap_rank(ds, B=3, seed=5)
    assert r1.scores == r2.scores
    assert r1.scores["a"] == 1.0


def test_bootstrap_score_is_fraction():
    r = FeatureRanking({"x": 7 / 10}, {"x": "static"}, 10)
    assert r.scores["x"] == pytest.approx(0.7)


def test_bootstrap_rejects_bad_args():
    with pytest.raises(ValueError):
        bootstrap_rank(_toy_dataset(), B=0)
    with pytest.raises(ValueError):
        bootstrap_rank(_toy_dataset(), B=1, fraction=0.0)


def test_ranking_csv_roundtrip():
    r = FeatureRanking({"s1": 0.5, "d0_lag1": 1.0}, {"s1": "static", "d0_lag1": "dynamic(1)"}, 4)
    back = FeatureRanking.from_csv(r.to_csv())
    assert back.scores == r.scores and back.scale_tags == r.scale_tags


def test_select_top_four_static():
    scores = {f"s{i}": v for i, v in enumerate([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2])}
    tags = dict.fromkeys(scores, "static")
    assert select_features(scores, tags) == ["s0", "s1", "s2", "s3"]


def test_select_tie_alphabetical():
    scores = {"a": 0.9, "b": 0.8, "c": 0.7, "e": 0.5, "d": 0.5}
    tags = dict.fromkeys(scores, "static")
    assert sorted(select_features(scores, tags)) == ["a", "b", "c", "d"]


def test_select_fewer_dynamic_than_k():
    scores = {"x_lag0": 0.1, "y_lag1": 0.0, "z_lag0": 0.3, "s": 1.0}
    tags = {"x_lag0": "dynamic(0)", "y_lag1": "dynamic(1)", "z_lag0": "dynamic(0)", "s": "static"}
    assert set(select_features(scores, tags)) == set(scores)


def test_cpdag_of_collider_is_directed():
    g = cpdag(dag("XYZ", [("X", "Y"), ("Z", "Y")]))
    assert g.is_directed("X", "Y") and g.is_directed("Z", "Y")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_pc_invariant_to_node_order(seed, rnd):
    truth = random_dag(6, 0.4, seed=seed)
    nodes = list(truth.nodes)
    rnd.shuffle(nodes)
    a = pc(dsep_oracle(truth), truth.nodes, max_depth=None)
    b = pc(dsep_oracle(truth), nodes, max_depth=None)
    assert a.undirected_edges == b.undirected_edges and a.directed_edges == b.directed_edges


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_skeleton_removals_are_logged(seed):
    truth = random_dag(6, 0.4, seed=seed)
    oracle = dsep_oracle(truth)
    sk = pc_skeleton(oracle, truth.nodes, max_depth=None)
    for a, b in combinations(truth.nodes, 2):
        if not sk.is_adjacent(a, b):
            assert oracle(a, b, sk.sepsets[frozenset((a, b))]) >= 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_two_stage_never_orients_out_of_response(seed):
    truth = random_dag(6, 0.5, seed=seed, names=["a", "b", "c", "d", "e", "R"])
    g = pc_two_stage(dsep_oracle(truth), list("abcde"), "R", max_depth=None)
    assert g.children("R") == []


def test_bootstrap_with_per_run_features():
    ds = _toy_dataset()
    r = bootstrap_rank(ds, B=2, seed=1, shared_features=False)
    assert r.scores["a"] == 1.0 and r.B == 2
