import itertools

import networkx as nx
import numpy as np
import pytest
import scipy.sparse as sp

from distsage.datasets import gen_synthetic
from distsage.graph import build_csr, csr_from_arrays
from distsage.partition import (BalanceConstraints, CoarseLevel, ConstraintInfeasible, build_partitions, coarsen,
                                count_edge_cut, initial_partition, partition, partition_stats, random_partition,
                                refine, undirected_support)

from conftest import random_graph, two_cliques


def level_of(edges, n, weights=None):
    g = build_csr(edges, n)
    w = np.ones((n, 1)) if weights is None else weights
    return CoarseLevel(undirected_support(g), w)


def path4():
    return [(0, 1), (1, 2), (2, 3)]


# --- coarsening ---------------------------------------------------------------

def test_coarsen_four_cycle():
    lvl = level_of([(0, 1), (1, 2), (2, 3), (3, 0)], 4)
    out = coarsen(lvl, np.random.default_rng(0))
    assert out.num_nodes == 2
    assert out.adj.nnz == 2 and out.adj[0, 1] == 2  # two unit edges merged
    # the two possible perfect matchings of the 4-cycle
    pairs = {frozenset(np.flatnonzero(out.coarse_map == c).tolist()) for c in range(2)}
    assert pairs in ({frozenset({0, 1}), frozenset({2, 3})}, {frozenset({1, 2}), frozenset({0, 3})})
    again = coarsen(lvl, np.random.default_rng(0))
    assert np.array_equal(out.coarse_map, again.coarse_map)


def test_coarsen_single_edge():
    out = coarsen(level_of([(0, 1)], 2), np.random.default_rng(0))
    assert out.num_nodes == 1
    assert out.adj.nnz == 0


def test_coarsen_star():
    out = coarsen(level_of([(0, i) for i in range(1, 6)], 6), np.random.default_rng(3))
    assert out.num_nodes == 5
    hub = out.coarse_map[0]
    assert np.count_nonzero(out.coarse_map == hub) == 2


def test_coarsen_no_edges_is_terminal():
    out = coarsen(level_of([], 5), np.random.default_rng(0))
    assert out.terminal
    assert out.num_nodes == 5


@pytest.mark.parametrize("seed", range(5))
def test_coarsen_conserves_weights_and_is_surjective(seed):
    g = random_graph(200, 1500, seed)
    rng = np.random.default_rng(seed)
    w = rng.integers(0, 3, size=(200, 2)).astype(float)
    lvl = CoarseLevel(undirected_support(g), w)
    while not lvl.terminal and lvl.num_nodes > 10:
        nxt = coarsen(lvl, rng)
        if nxt.terminal:
            break
        assert np.allclose(nxt.node_weights.sum(axis=0), w.sum(axis=0))
        assert np.array_equal(np.unique(nxt.coarse_map), np.arange(nxt.num_nodes))
        assert nxt.num_nodes < lvl.num_nodes
        assert (nxt.adj != nxt.adj.T).nnz == 0
        lvl = nxt


def test_coarsen_degree_cap():
    # dense graph: each coarse vertex keeps at most ceil(avg constituent degree) edges,
    # plus edges kept by the other endpoint
    n = 60
    g = random_graph(n, 1200, 7)
    lvl = CoarseLevel(undirected_support(g), np.ones((n, 1)))
    out = coarsen(lvl, np.random.default_rng(0))
    fine_deg = np.diff(lvl.adj.indptr)
    cap = np.ceil(np.bincount(out.coarse_map, weights=fine_deg) / np.bincount(out.coarse_map))
    # recompute the kept set per endpoint: the union bound is 2*cap summed
    assert out.adj.nnz <= 2 * cap.sum()
    # the heaviest edge of every coarse vertex survives
    merged = sp.csr_matrix((np.ones(n), (np.arange(n), out.coarse_map))).T @ lvl.adj @ \
        sp.csr_matrix((np.ones(n), (np.arange(n), out.coarse_map)))
    merged = sp.csr_matrix(merged)
    merged.setdiag(0)
    merged.eliminate_zeros()
    for u in range(out.num_nodes):
        row = merged.getrow(u)
        if row.nnz:
            top = row.indices[row.data == row.data.max()].min()
            assert out.adj[u, top] == row.data.max()


# --- initial partition / refine -----------------------------------------------------

def brute_force_cut(edges, n, k, constraints):
    g = build_csr(edges, n)
    best = None
    for combo in itertools.product(range(k), repeat=n):
        a = np.array(combo)
        if partition_stats(a, g, constraints).balanced:
            c = count_edge_cut(g, a)
            best = c if best is None else min(best, c)
    return best


def test_two_triangles_bisection():
    edges = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]
    cons = BalanceConstraints.uniform(6, 2)
    pa = initial_partition(level_of(edges, 6), cons)
    assert pa.edge_cut == 0
    assert brute_force_cut(edges, 6, 2, cons) == 0
    assert len(set(pa.assign[:3])) == 1 and len(set(pa.assign[3:])) == 1
    assert pa.assign[0] != pa.assign[3]


def test_path_balanced_bisection():
    cons = BalanceConstraints.uniform(4, 2, tolerance=0.0)
    pa = initial_partition(level_of(path4(), 4), cons)
    assert pa.edge_cut == 1
    assert brute_force_cut(path4(), 4, 2, cons) == 1
    assert pa.assign[0] == pa.assign[1] != pa.assign[2] == pa.assign[3]


def test_initial_partition_k1():
    pa = initial_partition(level_of(path4(), 4), BalanceConstraints.uniform(4, 1))
    assert pa.assign.tolist() == [0, 0, 0, 0] and pa.edge_cut == 0


def test_infeasible_constraints():
    labels = np.stack([np.ones(6), np.array([1, 0, 0, 0, 0, 0])], axis=1)
    with pytest.raises(ConstraintInfeasible):
        initial_partition(level_of(path4() + [(3, 4), (4, 5)], 6, labels), BalanceConstraints(labels, 2))
    with pytest.raises(ConstraintInfeasible):
        partition(build_csr(path4(), 4), BalanceConstraints.uniform(4, 5))


def test_refine_moves_node_one():
    lvl = level_of(path4(), 4)
    cons = BalanceConstraints.uniform(4, 2, tolerance=1.0)
    out = refine(lvl, np.array([0, 1, 1, 1]), cons, iters=1)
    assert out.assign.tolist() == [0, 0, 1, 1]
    assert out.edge_cut == 1


def test_refine_keeps_optimal_assignment():
    lvl = level_of(path4(), 4)
    out = refine(lvl, np.array([0, 0, 1, 1]), BalanceConstraints.uniform(4, 2), iters=3)
    assert out.assign.tolist() == [0, 0, 1, 1]


def test_refine_zero_iters_is_identity():
    lvl = level_of(path4(), 4)
    a = np.array([1, 0, 1, 0])
    out = refine(lvl, a, BalanceConstraints.uniform(4, 2, tolerance=1.0), iters=0)
    assert out.assign.tolist() == a.tolist()


@pytest.mark.parametrize("seed", range(6))
def test_refine_never_increases_cut(seed):
    g = random_graph(120, 600, seed)
    lvl = CoarseLevel(undirected_support(g), np.ones((120, 1)))
    a = np.random.default_rng(seed).integers(0, 3, 120)
    cons = BalanceConstraints.uniform(120, 3, tolerance=0.3)
    before = partition_stats(a, g, num_parts=3).edge_cut
    out = refine(lvl, a, cons, iters=4)
    assert count_edge_cut(g, out.assign) <= before


# --- full driver ------------------------------------------------------------------

def test_two_cliques_cut_is_one():
    g = two_cliques(10)
    pa = partition(g, BalanceConstraints.uniform(20, 2), seed=0)
    assert pa.edge_cut == 1
    nxg = nx.Graph()
    src, dst, _ = g.edge_list()
    nxg.add_edges_from(zip(src.tolist(), dst.tolist()), capacity=1)
    assert nx.minimum_cut(nxg, 0, 19)[0] == 1


def test_karate_beats_random_bisections():
    kg = nx.karate_club_graph()
    e = np.array(kg.edges())
    g = csr_from_arrays(e[:, 0], e[:, 1], 34)
    cons = BalanceConstraints.uniform(34, 2)
    pa = partition(g, cons, seed=0)
    rng = np.random.default_rng(0)
    cuts = []
    for _ in range(1000):
        a = np.zeros(34, dtype=int)
        a[rng.permutation(34)[:17]] = 1
        cuts.append(count_edge_cut(g, a))
    assert pa.edge_cut < np.median(cuts)
    assert pa.balanced


def test_k1_partition():
    g = random_graph(30, 90, 0)
    pa = partition(g, BalanceConstraints.uniform(30, 1))
    assert pa.edge_cut == 0 and np.all(pa.assign == 0)


@pytest.mark.parametrize("seed", range(4))
def test_reported_cut_matches_oracle(seed):
    ds = gen_synthetic(num_nodes=400, seed=seed)
    g = ds.graph()
    cons = BalanceConstraints.from_masks(4, ds.train_mask, tolerance=0.05)
    pa = partition(g, cons, seed=seed)
    rep = partition_stats(pa.assign, g, cons)
    assert pa.edge_cut == rep.edge_cut == count_edge_cut(g, pa.assign)
    assert pa.balanced == rep.balanced
    assert np.allclose(pa.imbalance, rep.imbalance)


def test_partition_is_deterministic():
    g = random_graph(300, 2000, 3)
    cons = BalanceConstraints.uniform(300, 3)
    a = partition(g, cons, seed=5).assign
    b = partition(g, cons, seed=5).assign
    assert np.array_equal(a, b)


def test_unbalanced_result_is_reported():
    # a star cannot be split into two equal halves with weight concentrated on the hub
    labels = np.ones((5, 1))
    labels[0] = 10
    g = build_csr([(0, i) for i in range(1, 5)], 5)
    pa = partition(g, BalanceConstraints(labels, 2, 0.05))
    assert not pa.balanced
    assert not partition_stats(pa.assign, g, BalanceConstraints(labels, 2, 0.05)).balanced


# --- random baseline -------------------------------------------------------------------

def test_random_partition_k1_and_determinism():
    g = random_graph(50, 200, 0)
    assert random_partition(g, 1).edge_cut == 0
    assert np.array_equal(random_partition(g, 4, 9).assign, random_partition(g, 4, 9).assign)


def test_random_partition_expected_cut():
    cuts = []
    rng = np.random.default_rng(0)
    for seed in range(50):
        er = nx.gnp_random_graph(100, 0.1, seed=seed)
        e = np.array(er.edges())
        g = csr_from_arrays(e[:, 0], e[:, 1], 100)
        cuts.append(random_partition(g, 4, int(rng.integers(1 << 30))).edge_cut / g.num_edges)
    assert abs(np.mean(cuts) - 0.75) < 0.075


# --- partition stats -----------------------------------------------------------------

def test_stats_examples():
    g = build_csr(path4(), 4)
    rep = partition_stats(np.array([0, 0, 1, 1]), g, BalanceConstraints.uniform(4, 2))
    assert rep.edge_cut == 1 and rep.imbalance.tolist() == [1.0]
    rep = partition_stats(np.zeros(4, dtype=int), g, BalanceConstraints.uniform(4, 2))
    assert rep.imbalance.tolist() == [2.0]
    assert not rep.balanced
    empty = build_csr([], 0)
    rep = partition_stats(np.zeros(0, dtype=int), empty, BalanceConstraints.uniform(0, 2))
    assert rep.edge_cut == 0 and rep.imbalance.tolist() == [1.0]


def test_stats_report_text():
    g = build_csr(path4(), 4)
    text = partition_stats(np.array([0, 0, 1, 1]), g, num_parts=2).to_text()
    fields = dict(line.split(": ", 1) for line in text.strip().splitlines())
    assert fields["edge_cut"] == "1"
    assert fields["halo_counts"] == "0,1"
    assert fields["balanced"] == "true"


# --- build_partitions -----------------------------------------------------------------

def test_build_partitions_three_cycle():
    g = build_csr([(0, 1), (1, 2), (2, 0)], 3)
    parts, book, _ = build_partitions(g, np.array([0, 0, 1]))
    p0, p1 = parts
    orig = book.node_perm_inv
    assert sorted(orig[p0.local_to_global[:p0.num_core]].tolist()) == [0, 1]
    assert orig[p0.local_to_global[p0.num_core:]].tolist() == [2]
    assert orig[p1.local_to_global[:p1.num_core]].tolist() == [2]
    assert orig[p1.local_to_global[p1.num_core:]].tolist() == [1]


def test_single_partition_has_no_halo():
    g = random_graph(20, 60, 2)
    parts, _, _ = build_partitions(g, np.zeros(20, dtype=int))
    assert parts[0].num_halo == 0


def test_isolated_node_has_empty_row():
    g = build_csr([(0, 1)], 3)
    parts, book, _ = build_partitions(g, np.array([0, 1, 1]))
    p1 = parts[1]
    local = int(np.flatnonzero(book.node_perm_inv[p1.local_to_global] == 2)[0])
    assert local < p1.num_core
    assert p1.local_graph.row_offsets[local + 1] == p1.local_graph.row_offsets[local]


@pytest.mark.parametrize("seed", range(5))
def test_core_vertices_hold_full_in_neighbourhood(seed):
    g = random_graph(80, 400, seed)
    assign = np.random.default_rng(seed).integers(0, 4, 80)
    parts, book, rg = build_partitions(g, assign, 4)
    seen_edges = []
    for part in parts:
        lo, hi = book.node_range(part.part_id)
        assert np.array_equal(part.local_to_global[:part.num_core], np.arange(lo, hi))
        lg = part.local_graph
        lg.validate()
        assert np.all(np.diff(lg.row_offsets)[part.num_core:] == 0)
        for v in range(part.num_core):
            gv = part.local_to_global[v]
            srcs, eids = rg.in_edges(gv)
            lsrc, leid = lg.in_edges(v)
            assert sorted(part.local_to_global[lsrc].tolist()) == sorted(srcs.tolist())
            assert sorted(part.edge_local_to_global[leid].tolist()) == sorted(eids.tolist())
        halo = part.local_to_global[part.num_core:]
        assert np.all(book.nid2partid(halo) != part.part_id)
        seen_edges.extend(part.edge_local_to_global.tolist())
    assert sorted(seen_edges) == list(range(g.num_edges))
