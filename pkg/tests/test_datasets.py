import itertools
import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deqkg.datasets import (
    FD2_CLAUSES,
    CoverageError,
    DatasetBundle,
    DatasetError,
    UQERClause,
    fd2_bundles,
    fd2_graph,
    fd2_sizes,
    forest_fire_sample,
    generate_fd2,
    read_bundle,
    read_clause,
    sample_subgraph,
    split_dataset,
    topic_split,
    uqer_derive,
    uqer_derive_all,
    write_bundle,
    write_clause,
)
from deqkg.graph import KnowledgeGraph, Triplet, apply_permutation, random_permutation_pair

from .conftest import random_graph


# -- FD-2 ----------------------------------------------------------------------------


def test_fd2_depth2_by_hand():
    obs, q = generate_fd2([2])
    # heap order: 0 root, 1-2 depth one, 3-6 depth two; odd v -> relation 0, even v -> relation 1
    assert sorted(obs) == [(1, 0, 0), (2, 1, 0), (3, 0, 1), (4, 1, 1), (5, 0, 2), (6, 1, 2)]
    assert sorted(q) == [(3, 0, 0), (4, 1, 0), (5, 0, 0), (6, 1, 0)]


@pytest.mark.parametrize("D", range(1, 9))
def test_fd2_closed_forms(D):
    obs, q = generate_fd2([D])
    n, r = fd2_sizes([D])
    assert n == 2 ** (D + 1) - 1 and r == 2
    assert len(set(obs)) == len(obs) == 2 ** (D + 1) - 2
    assert len(set(q)) == len(q) == sum(2 ** d for d in range(2, D + 1))
    KnowledgeGraph(obs, n, r)


def test_fd2_benchmark_sizes():
    assert fd2_sizes([6]) == (127, 2)
    assert fd2_sizes([6, 6]) == (254, 4)
    g, q = fd2_graph([6, 6])
    assert g.num_triplets == 252 and len(q) == 248


def test_fd2_trees_are_disjoint():
    g, q = fd2_graph([3, 2])
    first = set(range(15))
    for h, r, t in g.triplets.tolist():
        assert (h in first) == (t in first) == (r < 2)


def test_fd2_shared_relations():
    g, _ = fd2_graph([2, 2], relation_offset_per_tree=False)
    assert g.num_relations == 2 and g.num_nodes == 14


def test_fd2_rejects_depth_zero():
    with pytest.raises(DatasetError):
        generate_fd2([0])


def test_fd2_bundles_disjoint_names():
    tr, te = fd2_bundles([4], [3, 3])
    assert not set(tr.node_names) & set(te.node_names)
    assert not set(tr.relation_names) & set(te.relation_names)
    assert len(tr.valid) == int(0.1 * 28) and len(tr.train) + len(tr.valid) == 28
    assert len(te.test) == 24 and not te.train


# -- budgeted BFS sampling -----------------------------------------------------------


def _is_connected(triplets):
    if not triplets:
        return True
    adj = {}
    for h, _, t in triplets:
        adj.setdefault(h, set()).add(t)
        adj.setdefault(t, set()).add(h)
    start = next(iter(adj))
    seen, queue = {start}, deque([start])
    while queue:
        for v in adj[queue.popleft()] - seen:
            seen.add(v)
            queue.append(v)
    return seen == set(adj)


def test_sample_budgets_inactive():
    g, _ = fd2_graph([4])
    out = sample_subgraph(g, 10 ** 6, 10 ** 6, 10 ** 6, seed=0)
    assert sorted(out) == sorted(map(tuple, g.triplets.tolist()))


def test_sample_star_degree_one():
    star = [(0, 0, k) for k in range(1, 6)]
    for seed in range(20):
        out = sample_subgraph(star, 100, 100, 1, seed)
        assert len(out) == 1 and out[0] in star


def test_sample_deterministic():
    g, _ = fd2_graph([6])
    assert sample_subgraph(g, 40, 60, 2, seed=3) == sample_subgraph(g, 40, 60, 2, seed=3)


def test_sample_start_highest_degree_lowest_index():
    trip = [(0, 0, 1), (2, 0, 3), (2, 0, 4), (2, 0, 6), (3, 0, 4), (5, 0, 3)]
    out = sample_subgraph(trip, 10, 3, 10, 0)
    # nodes 2 and 3 tie at degree 3; the sample grows from node 2
    assert out == [(2, 0, 3), (2, 0, 4), (2, 0, 6)]


def test_sample_rejects_empty_and_bad_budgets():
    with pytest.raises(DatasetError):
        sample_subgraph([], 5, 5, 5)
    with pytest.raises(DatasetError):
        sample_subgraph([(0, 0, 1)], 0, 5, 5)


def test_sample_budgets_and_connectivity_100_runs():
    rng = np.random.default_rng(0)
    for seed in range(100):
        g = random_graph(rng, max_nodes=60, max_rels=4, density=0.04)
        if g.num_triplets == 0:
            continue
        N_max, M_max, D_max = (int(x) for x in rng.integers(1, 30, size=3))
        out = sample_subgraph(g, N_max, M_max, D_max, seed)
        nodes = {v for h, _, t in out for v in (h, t)}
        assert len(nodes) <= N_max and len(out) <= M_max
        assert set(out) <= g.triplet_set()
        assert _is_connected(out)


# -- splits ---------------------------------------------------------------------------


def _ring(n, R=2):
    return [(i, i % R, (i + 1) % n) for i in range(n)] + [(i, (i + 1) % R, (i + 2) % n) for i in range(n)]


def test_split_sizes_ten():
    trip = _ring(5)
    b = split_dataset(trip, (0.8, 0.1, 0.1), seed=0)
    assert (len(b.observed), len(b.valid), len(b.test)) == (8, 1, 1)


def test_split_two_way():
    b = split_dataset(_ring(20), (0.9, 0.1), seed=1)
    assert (len(b.observed), len(b.valid), len(b.test)) == (36, 0, 4)


def test_split_deterministic():
    a = split_dataset(_ring(30), seed=4)
    b = split_dataset(_ring(30), seed=4)
    assert a.observed == b.observed and a.valid == b.valid and a.test == b.test


def test_split_star_keeps_leaves():
    star = [(0, 0, k) for k in range(1, 5)] + [(1, 1, 2), (2, 1, 3), (3, 1, 1), (1, 0, 3)]
    for seed in range(100):
        b = split_dataset(star, (0.75, 0.25), seed)
        assert (0, 0, 4) in b.observed
        b.check()


def test_split_infeasible_lists_blockers():
    with pytest.raises(CoverageError) as err:
        split_dataset([(0, 0, k) for k in range(1, 5)], (0.5, 0.5), 0)
    assert err.value.blocking_nodes


def test_split_never_orphans_random():
    rng = np.random.default_rng(1)
    for seed in range(50):
        g = random_graph(rng, max_nodes=25, max_rels=3, density=0.15)
        if g.num_triplets < 10:
            continue
        try:
            b = split_dataset(g.triplets, (0.8, 0.1, 0.1), seed, g.num_nodes, g.num_relations)
        except CoverageError:
            continue
        b.check()
        seen = set(b.observed.triplets[:, [0, 2]].ravel().tolist())
        assert {v for t in b.valid + b.test for v in (t.head, t.tail)} <= seen


def test_split_bad_ratios():
    with pytest.raises(DatasetError):
        split_dataset(_ring(5), (0.5, 0.4))
    with pytest.raises(DatasetError):
        split_dataset(_ring(5), (0.5, 0.2, 0.2, 0.1))


def test_bundle_check_catches_overlap():
    g = KnowledgeGraph([(0, 0, 1), (1, 0, 2)], 3, 1)
    with pytest.raises(DatasetError, match="overlaps"):
        DatasetBundle(g, test=[Triplet(0, 0, 1)]).check()
    with pytest.raises(DatasetError, match="absent"):
        DatasetBundle(KnowledgeGraph([(0, 0, 1)], 4, 1), test=[Triplet(2, 0, 3)]).check()


def test_bundle_round_trip(tmp_path):
    tr, _ = fd2_bundles([3], [3])
    write_bundle(tr, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert back.observed == tr.observed
    assert (back.train, back.valid) == (tr.train, tr.valid)
    assert back.node_names == tr.node_names
    meta = json.loads((tmp_path / "b" / "meta.json").read_text())
    assert meta["provenance"]["generator"] == "fd2" and meta["counts"]["train"] == len(tr.train)


def test_read_bundle_missing_meta(tmp_path):
    with pytest.raises(DatasetError, match="meta.json"):
        read_bundle(tmp_path)


# -- topics ---------------------------------------------------------------------------


def test_topic_single_group_identity():
    trip = _ring(6, R=3)
    (tg,) = topic_split(trip, {"all": [0, 1, 2]})
    assert tg.graph.num_triplets == len(set(trip))


def test_topic_conservation_and_reindexing():
    trip = _ring(9, R=3)
    parts = topic_split(trip, {"ab": [0, 1], "c": [2]})
    assert sum(p.graph.num_triplets for p in parts) == len(set(trip))
    assert [p.graph.num_relations for p in parts] == [2, 1]
    for p in parts:
        assert p.graph.num_nodes == len(p.node_ids)
        orig = {(int(p.node_ids[h]), int(p.relation_ids[r]), int(p.node_ids[t]))
                for h, r, t in p.graph.triplets.tolist()}
        assert orig <= set(trip)


def test_topic_overlap_rejected():
    with pytest.raises(DatasetError, match="appears in groups"):
        topic_split(_ring(4), {"a": [0, 1], "b": [1]})
    with pytest.raises(DatasetError, match="not covered"):
        topic_split(_ring(4), {"a": [0]})


# -- forest fire ---------------------------------------------------------------------------


def test_forest_fire_full_and_single():
    g, _ = fd2_graph([4])
    nodes, trip = forest_fire_sample(g, g.num_nodes, seed=0)
    assert nodes == set(range(g.num_nodes)) and len(trip) == g.num_triplets
    nodes, trip = forest_fire_sample(g, 1, seed=0)
    assert len(nodes) == 1 and trip == []


def test_forest_fire_deterministic_and_induced():
    rng = np.random.default_rng(2)
    g = random_graph(rng, max_nodes=100, max_rels=3, density=0.005)
    g = KnowledgeGraph(g.triplets, 100, g.num_relations)
    a = forest_fire_sample(g, 40, seed=9)
    b = forest_fire_sample(g, 40, seed=9)
    assert a == b
    nodes, trip = a
    assert len(nodes) == 40
    assert set(trip) == {t for t in map(Triplet._make, g.triplets.tolist()) if t.head in nodes and t.tail in nodes}


def test_forest_fire_restarts_on_disconnected():
    g = KnowledgeGraph([(0, 0, 1), (2, 0, 3), (4, 0, 5)], 8, 1)
    nodes, _ = forest_fire_sample(g, 8, seed=0)
    assert nodes == set(range(8))


def test_forest_fire_bad_target():
    g, _ = fd2_graph([2])
    with pytest.raises(DatasetError):
        forest_fire_sample(g, 0)
    with pytest.raises(DatasetError):
        forest_fire_sample(g, 8)


def test_forest_fire_burn_probability_zero_needs_restarts():
    # with p = 0 no neighbour ever ignites, so every node comes from a restart
    g, _ = fd2_graph([3])
    nodes, _ = forest_fire_sample(g, 6, burn_prob=0.0, seed=1)
    assert len(nodes) == 6
    with pytest.raises(DatasetError):
        forest_fire_sample(g, 10, burn_prob=0.0, seed=1, max_restarts=3)


# -- UQER -------------------------------------------------------------------------------------


def _naive_derive(clause, g):
    present = g.triplet_set()
    out = set()
    for rels in itertools.permutations(range(g.num_relations), clause.num_rel_vars):
        for nodes in itertools.permutations(range(g.num_nodes), clause.num_node_vars):
            if all((nodes[u], rels[c], nodes[v]) in present for u, c, v in clause.atoms):
                out.add(Triplet(nodes[0], rels[0], nodes[clause.head_var - 1]))
    return out


@pytest.mark.parametrize("D", [2, 3, 4])
def test_fd2_clauses_reproduce_queries(D):
    g, q = fd2_graph([D])
    assert uqer_derive_all(FD2_CLAUSES, g) == set(q)


def test_fd2_clauses_on_two_trees():
    g, q = fd2_graph([3, 2])
    assert uqer_derive_all(FD2_CLAUSES, g) == set(q)


def test_distinct_relation_clause_alone_is_partial():
    g, q = fd2_graph([3])
    part = uqer_derive(FD2_CLAUSES[1], g)
    assert part < set(q)


def test_unsatisfiable_body():
    clause = UQERClause(2, 1, 2, ((0, 0, 1), (1, 0, 0)))
    g = KnowledgeGraph([(0, 0, 1), (1, 0, 2)], 3, 1)
    assert uqer_derive(clause, g) == set()


def test_tautology_returns_graph():
    clause = UQERClause(2, 1, 2, ((0, 0, 1),))
    g = KnowledgeGraph([(0, 0, 1), (1, 1, 2), (2, 0, 0)], 3, 2)
    assert uqer_derive(clause, g) == set(map(Triplet._make, g.triplets.tolist()))


def test_uqer_matches_naive_enumeration():
    rng = np.random.default_rng(5)
    clauses = [*FD2_CLAUSES, UQERClause(3, 2, 1, ((0, 1, 1), (1, 0, 2), (2, 1, 0))),
               UQERClause(2, 2, 2, ((0, 1, 1), (1, 0, 0)))]
    for _ in range(30):
        g = random_graph(rng, max_nodes=7, max_rels=3, density=0.2)
        for c in clauses:
            if g.num_nodes >= c.num_node_vars and g.num_relations >= c.num_rel_vars:
                assert uqer_derive(c, g) == _naive_derive(c, g)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_uqer_commutes_with_permutation(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, max_nodes=12, max_rels=3, density=0.08)
    p = random_permutation_pair(g.num_nodes, g.num_relations, seed)
    for c in FD2_CLAUSES:
        if g.num_nodes < 3 or g.num_relations < c.num_rel_vars:
            continue
        lhs = uqer_derive(c, apply_permutation(g, p))
        rhs = {p.map_triplet(t) for t in uqer_derive(c, g)}
        assert lhs == rhs


def test_uqer_budget_and_size_errors():
    g, _ = fd2_graph([6])
    with pytest.raises(DatasetError, match="budget"):
        uqer_derive(FD2_CLAUSES[0], g, budget=1e3)
    with pytest.raises(DatasetError, match="smaller"):
        uqer_derive(FD2_CLAUSES[1], KnowledgeGraph([(0, 0, 1)], 3, 1))


def test_clause_side_conditions():
    with pytest.raises(DatasetError, match="E_3"):
        UQERClause(3, 1, 2, ((0, 0, 1),))
    with pytest.raises(DatasetError, match="C_2"):
        UQERClause(2, 2, 2, ((0, 0, 1),))
    with pytest.raises(DatasetError):
        UQERClause(2, 1, 3, ((0, 0, 1),))


def test_clause_indicator_round_trip(tmp_path):
    c = FD2_CLAUSES[1]
    B = c.indicator
    assert B.shape == (3, 2, 3) and B.sum() == 2 and B[0, 0, 2] == 1 and B[2, 1, 1] == 1
    assert UQERClause.from_indicator(B, 2) == c
    write_clause(c, tmp_path / "c.txt")
    assert read_clause(tmp_path / "c.txt") == c
    (tmp_path / "bad.txt").write_text("M 3\nK x\n")
    with pytest.raises(DatasetError, match=":2:"):
        read_clause(tmp_path / "bad.txt")
