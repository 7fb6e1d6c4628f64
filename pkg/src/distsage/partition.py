"""Multilevel min-cut partitioning with multi-constraint balancing.

The driver coarsens the undirected support of the input graph by heavy-edge
matching, partitions the coarsest graph by greedy graph growing, and then
projects the assignment back level by level, refining at each level with
boundary moves.  Each coarse vertex keeps only its heaviest edges, at most
the (rounded-up) average degree of the fine vertices it absorbed, so the
coarse graphs do not densify.

Loads are tracked per constraint and normalised so that 1.0 is a perfect
share (``part_sum * k / total``).  A partition is balanced when every
normalised load lies in ``[1 - eps, 1 + eps]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import ID_DTYPE, Graph, LocalPartition, PartitionBook, relabel


class ConstraintInfeasible(ValueError):
    """A balance constraint cannot be satisfied by any k-way assignment."""


@dataclass
class BalanceConstraints:
    node_labels: np.ndarray
    num_parts: int
    tolerance: float = 0.05

    def __post_init__(self):
        labels = np.asarray(self.node_labels, dtype=np.float64)
        if labels.ndim == 1:
            labels = labels[:, None]
        if labels.ndim != 2:
            raise ValueError("node_labels must be [num_nodes, num_constraints]")
        if np.any(labels < 0):
            raise ValueError("node labels must be non-negative")
        if self.num_parts < 1:
            raise ValueError("num_parts must be >= 1")
        self.node_labels = labels

    @classmethod
    def uniform(cls, num_nodes: int, num_parts: int, tolerance: float = 0.05):
        return cls(np.ones((num_nodes, 1)), num_parts, tolerance)

    @classmethod
    def from_masks(cls, num_parts: int, *masks, tolerance: float = 0.05):
        """Constraints ``[1, mask_1, mask_2, ...]`` per node."""
        n = len(masks[0]) if masks else 0
        cols = [np.ones(n)] + [np.asarray(m, dtype=np.float64) for m in masks]
        return cls(np.stack(cols, axis=1), num_parts, tolerance)


@dataclass
class CoarseLevel:
    adj: sp.csr_matrix
    node_weights: np.ndarray
    coarse_map: np.ndarray | None = None
    level: int = 0
    terminal: bool = False

    @property
    def num_nodes(self) -> int:
        return self.adj.shape[0]


@dataclass
class PartitionAssignment:
    assign: np.ndarray
    num_parts: int
    edge_cut: int
    imbalance: np.ndarray
    min_load: np.ndarray = field(default_factory=lambda: np.ones(0))
    balanced: bool = True


def undirected_support(g: Graph) -> sp.csr_matrix:
    """Symmetric weighted adjacency; weight of {u, v} counts edges u->v and v->u."""
    src, dst, _ = g.edge_list()
    keep = src != dst
    src, dst = src[keep], dst[keep]
    n = g.num_nodes
    a = sp.coo_matrix((np.ones(src.size), (src, dst)), shape=(n, n))
    a = (a + a.T).tocsr()
    a.sum_duplicates()
    a.sort_indices()
    return a


def edge_cut_weighted(adj: sp.csr_matrix, assign: np.ndarray) -> float:
    coo = adj.tocoo()
    return float(coo.data[assign[coo.row] != assign[coo.col]].sum() / 2)


def count_edge_cut(g: Graph, assign) -> int:
    assign = np.asarray(assign)
    src, dst, _ = g.edge_list()
    return int(np.count_nonzero(assign[src] != assign[dst]))


class _Balance:
    """Normalised multi-constraint load bookkeeping."""

    def __init__(self, weights: np.ndarray, k: int, eps: float):
        self.w = weights
        self.k = k
        self.eps = eps
        totals = weights.sum(axis=0)
        active = totals > 0
        self.scale = np.zeros_like(totals)
        self.scale[active] = k / totals[active]
        self.active = active

    def loads(self, assign: np.ndarray) -> np.ndarray:
        out = np.zeros((self.k, self.w.shape[1]))
        np.add.at(out, assign, self.w)
        return out

    def norm(self, loads: np.ndarray) -> np.ndarray:
        n = loads * self.scale
        n[..., ~self.active] = 1.0
        return n

    def violation(self, loads: np.ndarray) -> float:
        n = self.norm(loads)
        return float(np.maximum(n - (1 + self.eps), 0).sum() + np.maximum((1 - self.eps) - n, 0).sum())

    def part_violation(self, loads_row: np.ndarray) -> np.ndarray:
        n = self.norm(loads_row)
        return np.maximum(n - (1 + self.eps), 0).sum(-1) + np.maximum((1 - self.eps) - n, 0).sum(-1)

    def spread(self, loads_row: np.ndarray) -> np.ndarray:
        return (self.norm(loads_row) ** 2).sum(-1)


def coarsen(level: CoarseLevel, rng: np.random.Generator) -> CoarseLevel:
    """One round of heavy-edge matching followed by degree-capped edge retention."""
    adj = level.adj
    n = adj.shape[0]
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    match = np.full(n, -1, dtype=ID_DTYPE)
    matched_any = False
    for u in rng.permutation(n):
        if match[u] != -1:
            continue
        lo, hi = indptr[u], indptr[u + 1]
        nbrs = indices[lo:hi]
        ok = (match[nbrs] == -1) & (nbrs != u)
        if not ok.any():
            match[u] = u
            continue
        cand, w = nbrs[ok], data[lo:hi][ok]
        best = cand[w == w.max()].min()
        match[u] = best
        match[best] = u
        matched_any = True
    if not matched_any:
        return CoarseLevel(adj, level.node_weights, np.arange(n, dtype=ID_DTYPE),
                           level.level + 1, terminal=True)

    cmap = np.full(n, -1, dtype=ID_DTYPE)
    nc = 0
    for u in range(n):
        if cmap[u] == -1:
            cmap[u] = nc
            cmap[match[u]] = nc
            nc += 1

    proj = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    cadj = (proj.T @ adj @ proj).tocoo()
    off = cadj.row != cadj.col
    rows, cols, wts = cadj.row[off], cadj.col[off], cadj.data[off]
    weights = proj.T @ level.node_weights

    fine_deg = np.diff(indptr).astype(np.float64)
    csize = np.bincount(cmap, minlength=nc)
    cap = np.ceil(np.bincount(cmap, weights=fine_deg, minlength=nc) / csize).astype(np.int64)

    # rank each vertex's incident edges by weight (desc), neighbour id (asc)
    order = np.lexsort((cols, -wts, rows))
    rows_s, cols_s = rows[order], cols[order]
    first = np.searchsorted(rows_s, rows_s, side="left")
    rank = np.arange(rows_s.size) - first
    kept = rank < cap[rows_s]
    keep = sp.coo_matrix((np.ones(int(kept.sum())), (rows_s[kept], cols_s[kept])), shape=(nc, nc)).tocsr()
    keep = ((keep + keep.T) > 0).astype(np.float64)
    full = sp.coo_matrix((wts, (rows, cols)), shape=(nc, nc)).tocsr()
    new_adj = full.multiply(keep).tocsr()
    new_adj.eliminate_zeros()
    new_adj.sort_indices()
    return CoarseLevel(new_adj, np.asarray(weights), cmap, level.level + 1)


def _part_connectivity(adj: sp.csr_matrix, assign: np.ndarray, k: int) -> np.ndarray:
    n = adj.shape[0]
    onehot = sp.csr_matrix((np.ones(n), (np.arange(n), assign)), shape=(n, k))
    return np.asarray((adj @ onehot).todense())


def _bfs_dist(adj: sp.csr_matrix, sources) -> np.ndarray:
    from scipy.sparse.csgraph import shortest_path

    d = shortest_path(adj, unweighted=True, indices=list(sources), directed=False)
    return np.atleast_2d(d).min(axis=0)


def _check_feasible(weights: np.ndarray, k: int) -> None:
    for c in range(weights.shape[1]):
        positive = int(np.count_nonzero(weights[:, c] > 0))
        if 0 < positive < k:
            raise ConstraintInfeasible(
                f"constraint {c} has {positive} non-zero vertices, fewer than {k} parts")


def _grow(level: CoarseLevel, bal: _Balance, rng: np.random.Generator) -> np.ndarray:
    adj = level.adj
    n, k = level.num_nodes, bal.k
    w = level.node_weights
    cap = (1 + bal.eps) / np.where(bal.scale > 0, bal.scale, np.inf)
    assign = np.full(n, -1, dtype=ID_DTYPE)
    conn = np.zeros((n, k))
    loads = np.zeros((k, w.shape[1]))

    def claim(u, p):
        assign[u] = p
        loads[p] += w[u]
        lo, hi = adj.indptr[u], adj.indptr[u + 1]
        np.add.at(conn[:, p], adj.indices[lo:hi], adj.data[lo:hi])

    seeds = [int(rng.integers(n))]
    while len(seeds) < min(k, n):
        dist = _bfs_dist(adj, seeds)
        dist[seeds] = -1
        far = np.flatnonzero(dist == dist.max())
        seeds.append(int(far[0]) if np.isfinite(dist.max()) else int(rng.choice(far)))
    for p, s in enumerate(seeds):
        claim(s, p)

    closed = np.zeros(k, dtype=bool)
    remaining = n - len(seeds)
    while remaining:
        open_parts = np.flatnonzero(~closed)
        if open_parts.size == 0:
            # every part is full: place the rest where the overflow is smallest
            for u in np.flatnonzero(assign == -1):
                after = bal.norm(loads + w[u]).max(axis=1)
                claim(u, int(np.argmin(after)))
            break
        p = int(open_parts[np.argmin(bal.norm(loads[open_parts]).max(axis=1))])
        free = assign == -1
        fits = free & np.all(loads[p] + w <= cap + 1e-9, axis=1)
        if not fits.any():
            closed[p] = True
            continue
        boundary = fits & (conn[:, p] > 0)
        if boundary.any():
            gain = conn[:, p] - (conn.sum(axis=1) - conn[:, p])
            gain[~boundary] = -np.inf
            u = int(np.argmax(gain))
        else:
            u = int(rng.choice(np.flatnonzero(fits)))
        claim(u, p)
        remaining -= 1
    return assign


def initial_partition(coarsest: CoarseLevel, constraints: BalanceConstraints, trials: int = 1,
                      rng: np.random.Generator | None = None, refine_iters: int = 1,
                      check: bool = True) -> PartitionAssignment:
    """Greedy graph growing; the best of ``trials`` seeded runs by edge cut."""
    rng = np.random.default_rng(0) if rng is None else rng
    k = constraints.num_parts
    w = coarsest.node_weights
    if check:
        _check_feasible(w, k)
    bal = _Balance(w, k, constraints.tolerance)
    if k == 1 or coarsest.num_nodes == 0:
        assign = np.zeros(coarsest.num_nodes, dtype=ID_DTYPE)
        return _summarize(coarsest, assign, bal)
    best = None
    for _ in range(max(1, trials)):
        assign = _grow(coarsest, bal, rng)
        assign = rebalance(coarsest, assign, bal, rng)
        assign = _refine(coarsest, assign, bal, refine_iters, rng)
        key = (bal.violation(bal.loads(assign)) > 1e-9, edge_cut_weighted(coarsest.adj, assign))
        if best is None or key < best[0]:
            best = (key, assign)
    return _summarize(coarsest, best[1], bal)


def _summarize(level: CoarseLevel, assign: np.ndarray, bal: _Balance) -> PartitionAssignment:
    loads = bal.norm(bal.loads(assign))
    cut = edge_cut_weighted(level.adj, assign)
    return PartitionAssignment(assign, bal.k, int(round(cut)), loads.max(axis=0), loads.min(axis=0),
                               bal.violation(bal.loads(assign)) <= 1e-9)


def _refine(level: CoarseLevel, assign: np.ndarray, bal: _Balance, iters: int,
            rng: np.random.Generator) -> np.ndarray:
    adj = level.adj
    w = level.node_weights
    k = bal.k
    assign = assign.copy()
    loads = bal.loads(assign)
    counts = np.bincount(assign, minlength=k)
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    for _ in range(iters):
        conn = _part_connectivity(adj, assign, k)
        boundary = np.flatnonzero(conn[np.arange(len(assign)), assign] < conn.sum(axis=1))
        moved = 0
        for u in rng.permutation(boundary):
            a = assign[u]
            if counts[a] == 1:  # never empty a part
                continue
            lo, hi = indptr[u], indptr[u + 1]
            cu = np.bincount(assign[indices[lo:hi]], weights=data[lo:hi], minlength=k)
            gains = cu - cu[a]
            gains[a] = -np.inf
            gains[cu == 0] = -np.inf
            if not np.isfinite(gains).any():
                continue
            src_after = loads[a] - w[u]
            before = bal.part_violation(loads[a]) + bal.part_violation(loads)
            after = bal.part_violation(src_after) + bal.part_violation(loads + w[u])
            # violation change for moving u from a to each q
            dv = after - before
            spread_delta = (bal.spread(src_after) - bal.spread(loads[a])
                            + bal.spread(loads + w[u]) - bal.spread(loads))
            ok = np.isfinite(gains) & (dv <= 1e-12) & (
                (gains > 0) | ((gains == 0) & ((dv < -1e-12) | (spread_delta < -1e-12))))
            if not ok.any():
                continue
            cand = np.flatnonzero(ok)
            q = int(cand[np.lexsort((spread_delta[cand], -gains[cand]))[0]])
            assign[u] = q
            loads[a] -= w[u]
            loads[q] += w[u]
            counts[a] -= 1
            counts[q] += 1
            moved += 1
        if not moved:
            break
    return assign


def refine(level: CoarseLevel, assign: PartitionAssignment | np.ndarray, constraints: BalanceConstraints,
           iters: int = 1, rng: np.random.Generator | None = None) -> PartitionAssignment:
    """Greedy boundary refinement.

    A vertex moves when the move has positive gain, or zero gain and
    strictly improves balance; a move never adds to balance violation
    and never leaves a part empty.
    The edge cut therefore never increases.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arr = assign.assign if isinstance(assign, PartitionAssignment) else np.asarray(assign, dtype=ID_DTYPE)
    bal = _Balance(level.node_weights, constraints.num_parts, constraints.tolerance)
    return _summarize(level, _refine(level, arr, bal, iters, rng), bal)


def rebalance(level: CoarseLevel, assign: np.ndarray, bal: _Balance, rng: np.random.Generator,
              max_moves: int | None = None) -> np.ndarray:
    """Move vertices until no load is outside ``[1-eps, 1+eps]`` (best effort).

    Among moves that reduce total violation, the one losing the least cut is
    applied first.
    """
    adj = level.adj
    w = level.node_weights
    k = bal.k
    n = len(assign)
    assign = assign.copy()
    loads = bal.loads(assign)
    viol = bal.violation(loads)
    if viol <= 1e-12 or k == 1:
        return assign
    conn = _part_connectivity(adj, assign, k)
    max_moves = 4 * n if max_moves is None else max_moves
    rows = np.arange(n)
    for _ in range(max_moves):
        a = assign
        pv = bal.part_violation(loads)
        src_after = loads[a] - w                                     # [n, C]
        tgt_after = loads[None, :, :] + w[:, None, :]                # [n, k, C]
        dv = (bal.part_violation(src_after)[:, None] - pv[a][:, None]
              + bal.part_violation(tgt_after) - pv[None, :])
        dv[rows, a] = np.inf
        gain = conn - conn[rows, a][:, None]
        cand = dv < -1e-12
        if not cand.any():
            break
        score_gain = np.where(cand, gain, -np.inf)
        best_gain = score_gain.max()
        tie = cand & (score_gain == best_gain)
        dv_tie = np.where(tie, dv, np.inf)
        u, q = np.unravel_index(int(np.argmin(dv_tie)), dv.shape)
        p = assign[u]
        assign[u] = q
        loads[p] -= w[u]
        loads[q] += w[u]
        lo, hi = adj.indptr[u], adj.indptr[u + 1]
        nb, wt = adj.indices[lo:hi], adj.data[lo:hi]
        np.add.at(conn[:, p], nb, -wt)
        np.add.at(conn[:, q], nb, wt)
        if bal.violation(loads) <= 1e-12:
            break
    return assign


def partition(g: Graph, constraints: BalanceConstraints, seed: int = 0, coarsen_to: int | None = None,
              trials: int = 1, refine_iters: int = 1) -> PartitionAssignment:
    """Multilevel k-way min-cut partitioning of ``g``'s undirected support."""
    k = constraints.num_parts
    n = g.num_nodes
    labels = constraints.node_labels
    if labels.shape[0] != n:
        raise ValueError("node_labels length does not match graph")
    _check_feasible(labels, k)
    rng = np.random.default_rng(seed)
    level = CoarseLevel(undirected_support(g), labels)
    bal = _Balance(labels, k, constraints.tolerance)
    if k == 1 or n == 0:
        return _finish(g, np.zeros(n, dtype=ID_DTYPE), bal)

    cap = 200 * k if coarsen_to is None else coarsen_to
    levels = [level]
    while levels[-1].num_nodes > cap:
        nxt = coarsen(levels[-1], rng)
        if nxt.terminal or nxt.num_nodes > 0.95 * levels[-1].num_nodes:
            break
        levels.append(nxt)

    coarse_constraints = BalanceConstraints(levels[-1].node_weights, k, constraints.tolerance)
    assign = initial_partition(levels[-1], coarse_constraints, trials, rng, refine_iters, check=False).assign
    for i in range(len(levels) - 2, -1, -1):
        assign = assign[levels[i + 1].coarse_map]
        lvl_bal = _Balance(levels[i].node_weights, k, constraints.tolerance)
        assign = rebalance(levels[i], assign, lvl_bal, rng)
        assign = _refine(levels[i], assign, lvl_bal, refine_iters, rng)
    return _finish(g, assign, bal)


def _finish(g: Graph, assign: np.ndarray, bal: _Balance) -> PartitionAssignment:
    loads = bal.norm(bal.loads(assign))
    return PartitionAssignment(assign.astype(ID_DTYPE), bal.k, count_edge_cut(g, assign),
                               loads.max(axis=0), loads.min(axis=0),
                               bal.violation(bal.loads(assign)) <= 1e-9)


def random_partition(g: Graph, k: int, seed: int = 0,
                     constraints: BalanceConstraints | None = None) -> PartitionAssignment:
    """Uniform i.i.d. vertex assignment, the locality-free baseline."""
    assign = np.random.default_rng(seed).integers(0, k, size=g.num_nodes).astype(ID_DTYPE)
    if constraints is None:
        constraints = BalanceConstraints.uniform(g.num_nodes, k)
    return _finish(g, assign, _Balance(constraints.node_labels, k, constraints.tolerance))


@dataclass
class PartitionReport:
    edge_cut: int
    imbalance: np.ndarray
    min_load: np.ndarray
    halo_counts: np.ndarray
    core_counts: np.ndarray
    balanced: bool

    def to_text(self) -> str:
        lines = [
            f"edge_cut: {self.edge_cut}",
            "imbalance: " + ",".join(f"{x:.6f}" for x in self.imbalance),
            "min_load: " + ",".join(f"{x:.6f}" for x in self.min_load),
            "core_counts: " + ",".join(str(int(x)) for x in self.core_counts),
            "halo_counts: " + ",".join(str(int(x)) for x in self.halo_counts),
            f"balanced: {str(self.balanced).lower()}",
        ]
        return "\n".join(lines) + "\n"


def partition_stats(assign, g: Graph, constraints: BalanceConstraints | None = None,
                    num_parts: int | None = None) -> PartitionReport:
    """Recompute cut, balance and halo sizes from scratch."""
    assign = np.asarray(assign.assign if isinstance(assign, PartitionAssignment) else assign, dtype=ID_DTYPE)
    if constraints is None:
        k = num_parts if num_parts is not None else int(assign.max(initial=0)) + 1
        constraints = BalanceConstraints.uniform(g.num_nodes, k)
    k = constraints.num_parts
    labels = constraints.node_labels
    src, dst, _ = g.edge_list()
    cut_mask = assign[src] != assign[dst]
    imb, lows = [], []
    for c in range(labels.shape[1]):
        total = labels[:, c].sum()
        if total <= 0:
            imb.append(1.0)
            lows.append(1.0)
            continue
        sums = np.bincount(assign, weights=labels[:, c], minlength=k)
        imb.append(float(sums.max() * k / total))
        lows.append(float(sums.min() * k / total))
    halo = np.zeros(k, dtype=np.int64)
    if cut_mask.any():
        pairs = np.unique(np.stack([assign[dst[cut_mask]], src[cut_mask]], axis=1), axis=0)
        halo = np.bincount(pairs[:, 0], minlength=k)
    eps = constraints.tolerance
    imb, lows = np.array(imb), np.array(lows)
    balanced = bool(np.all(imb <= 1 + eps + 1e-9) and np.all(lows >= 1 - eps - 1e-9))
    return PartitionReport(int(cut_mask.sum()), imb, lows, halo,
                           np.bincount(assign, minlength=k), balanced)


def build_partitions(g: Graph, assign, num_parts: int | None = None):
    """Split ``g`` into per-machine partitions with halo vertices.

    Edge ``u -> v`` belongs to the partition owning ``v``, so every core
    vertex sees its whole in-neighbourhood locally.  Returns the partitions
    (over relabeled global IDs), the book and the relabeled graph.
    """
    assign = np.asarray(assign.assign if isinstance(assign, PartitionAssignment) else assign, dtype=ID_DTYPE)
    k = int(assign.max(initial=0)) + 1 if num_parts is None else num_parts
    src, dst, eid = g.edge_list()
    edge_assign = np.empty(g.num_edges, dtype=ID_DTYPE)
    edge_assign[eid] = assign[dst]
    rg, book = relabel(g, assign, edge_assign, k)
    parts = [_local_partition(rg, book, p) for p in range(k)]
    return parts, book, rg


def _local_partition(rg: Graph, book: PartitionBook, p: int) -> LocalPartition:
    lo, hi = book.node_range(p)
    elo, ehi = book.edge_range(p)
    ro = rg.row_offsets
    e0, e1 = ro[lo], ro[hi]
    srcs = rg.col_indices[e0:e1]
    gl_eids = rg.edge_ids[e0:e1]
    if e1 - e0 and (gl_eids.min() < elo or gl_eids.max() >= ehi):
        raise AssertionError("edge ownership does not match the book")
    num_core = hi - lo
    halo = np.unique(srcs[(srcs < lo) | (srcs >= hi)])
    local_src = np.where((srcs >= lo) & (srcs < hi), srcs - lo,
                         num_core + np.searchsorted(halo, srcs))
    n_local = num_core + halo.size
    row_offsets = np.empty(n_local + 1, dtype=ID_DTYPE)
    row_offsets[: num_core + 1] = ro[lo:hi + 1] - e0
    row_offsets[num_core + 1:] = e1 - e0
    local_graph = Graph(n_local, row_offsets, local_src.astype(ID_DTYPE), (gl_eids - elo).astype(ID_DTYPE))
    l2g = np.concatenate([np.arange(lo, hi, dtype=ID_DTYPE), halo.astype(ID_DTYPE)])
    return LocalPartition(p, local_graph, l2g, num_core, np.arange(elo, ehi, dtype=ID_DTYPE))
