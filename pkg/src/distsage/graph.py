"""CSR graphs, partition books and per-machine partitions.

Rows of a :class:`Graph` are keyed by destination: row ``v`` lists the
sources ``u`` of every edge ``u -> v``.  Global IDs are the relabeled IDs in
which every partition's core vertices (and owned edges) form one contiguous
range, so resolving an ID is a binary search over ``num_parts + 1`` offsets
followed by a subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ID_DTYPE = np.int64


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    edge_ids: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.shape[0])

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def in_edges(self, v: int):
        """Return ``(sources, edge_ids)`` of the in-edges of ``v``."""
        lo, hi = self.row_offsets[v], self.row_offsets[v + 1]
        return self.col_indices[lo:hi], self.edge_ids[lo:hi]

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(src, dst, eid)`` arrays for every stored edge, ordered by eid."""
        dst = np.repeat(np.arange(self.num_nodes, dtype=ID_DTYPE), self.in_degrees())
        order = np.argsort(self.edge_ids, kind="stable")
        return self.col_indices[order], dst[order], self.edge_ids[order]

    def validate(self) -> None:
        ro = self.row_offsets
        if ro.shape != (self.num_nodes + 1,) or ro[0] != 0 or ro[-1] != self.num_edges:
            raise ValueError("row_offsets inconsistent with node/edge counts")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if self.num_edges:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.num_nodes:
                raise ValueError("col_indices out of range")
            if len(np.unique(self.edge_ids)) != self.num_edges:
                raise ValueError("edge_ids must be distinct")


def build_csr(edges, num_nodes: int) -> Graph:
    """Build a destination-keyed CSR graph.

    ``edges`` is any sequence of ``(src, dst)`` pairs or an ``(E, 2)`` array.
    Edge ``i`` of the input receives edge ID ``i``; duplicates and self-loops
    are kept.
    """
    arr = np.asarray(edges, dtype=ID_DTYPE).reshape(-1, 2)
    return csr_from_arrays(arr[:, 0], arr[:, 1], num_nodes)


def csr_from_arrays(src, dst, num_nodes: int, eids=None) -> Graph:
    src = np.asarray(src, dtype=ID_DTYPE)
    dst = np.asarray(dst, dtype=ID_DTYPE)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have equal length")
    if num_nodes < 0:
        raise ValueError("num_nodes must be non-negative")
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        raise ValueError(f"edge endpoint out of range for {num_nodes} nodes")
    if eids is None:
        eids = np.arange(src.size, dtype=ID_DTYPE)
    else:
        eids = np.asarray(eids, dtype=ID_DTYPE)
    order = np.argsort(dst, kind="stable")
    counts = np.bincount(dst, minlength=num_nodes)
    row_offsets = np.zeros(num_nodes + 1, dtype=ID_DTYPE)
    np.cumsum(counts, out=row_offsets[1:])
    return Graph(num_nodes, row_offsets, src[order], eids[order])


def _stable_group(assign: np.ndarray, num_parts: int):
    """Permutation grouping items by partition, stable within each partition."""
    new_to_old = np.argsort(assign, kind="stable").astype(ID_DTYPE)
    old_to_new = np.empty_like(new_to_old)
    old_to_new[new_to_old] = np.arange(new_to_old.size, dtype=ID_DTYPE)
    starts = np.zeros(num_parts + 1, dtype=ID_DTYPE)
    np.cumsum(np.bincount(assign, minlength=num_parts), out=starts[1:])
    return old_to_new, new_to_old, starts


@dataclass(frozen=True)
class PartitionBook:
    """Contiguous-range directory from global IDs to partitions.

    ``node_perm[orig] -> global`` and ``node_perm_inv[global] -> orig``;
    likewise for edges.
    """

    num_parts: int
    node_range_starts: np.ndarray
    edge_range_starts: np.ndarray
    node_perm: np.ndarray
    node_perm_inv: np.ndarray
    edge_perm: np.ndarray
    edge_perm_inv: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.node_range_starts[-1])

    @property
    def num_edges(self) -> int:
        return int(self.edge_range_starts[-1])

    def node_range(self, part: int) -> tuple[int, int]:
        return int(self.node_range_starts[part]), int(self.node_range_starts[part + 1])

    def edge_range(self, part: int) -> tuple[int, int]:
        return int(self.edge_range_starts[part]), int(self.edge_range_starts[part + 1])

    def num_core(self, part: int) -> int:
        lo, hi = self.node_range(part)
        return hi - lo

    def nid2partid(self, gids) -> np.ndarray:
        return _lookup(self.node_range_starts, gids)

    def eid2partid(self, gids) -> np.ndarray:
        return _lookup(self.edge_range_starts, gids)

    def nid2localid(self, gids, part: int | None = None) -> np.ndarray:
        gids = np.asarray(gids, dtype=ID_DTYPE)
        parts = self.nid2partid(gids) if part is None else part
        return gids - self.node_range_starts[parts]


def _lookup(starts: np.ndarray, gids) -> np.ndarray:
    gids = np.asarray(gids, dtype=ID_DTYPE)
    if gids.size and (gids.min() < 0 or gids.max() >= starts[-1]):
        raise IndexError(f"global ID out of range [0, {int(starts[-1])})")
    return np.searchsorted(starts, gids, side="right") - 1


def global_to_partition(book: PartitionBook, gid: int) -> int:
    return int(book.nid2partid(np.array([gid]))[0])


def global_to_local(book: PartitionBook, gid: int) -> tuple[int, int]:
    part = global_to_partition(book, gid)
    return part, int(gid - book.node_range_starts[part])


def relabel(g: Graph, assign, edge_assign, num_parts: int | None = None):
    """Renumber nodes and edges so each partition's IDs are contiguous.

    Returns the relabeled graph and its :class:`PartitionBook`.  The order of
    nodes (edges) inside a partition follows their original order.
    """
    assign = np.asarray(assign, dtype=ID_DTYPE)
    edge_assign = np.asarray(edge_assign, dtype=ID_DTYPE)
    if assign.shape != (g.num_nodes,) or edge_assign.shape != (g.num_edges,):
        raise ValueError("assignment length does not match graph")
    if num_parts is None:
        num_parts = int(max(assign.max(initial=0), edge_assign.max(initial=0))) + 1
    if np.any(assign < 0) or np.any(assign >= num_parts):
        raise ValueError("node assignment outside [0, num_parts)")
    if np.any(edge_assign < 0) or np.any(edge_assign >= num_parts):
        raise ValueError("edge assignment outside [0, num_parts)")
    node_perm, node_perm_inv, node_starts = _stable_group(assign, num_parts)
    edge_perm, edge_perm_inv, edge_starts = _stable_group(edge_assign, num_parts)
    src, dst, eid = g.edge_list()
    new = csr_from_arrays(node_perm[src], node_perm[dst], g.num_nodes, edge_perm[eid])
    book = PartitionBook(num_parts, node_starts, edge_starts,
                         node_perm, node_perm_inv, edge_perm, edge_perm_inv)
    return new, book


@dataclass(frozen=True)
class LocalPartition:
    """One machine's share of the graph.

    Local IDs ``[0, num_core)`` are the core vertices in global-ID order,
    followed by halo vertices.  The local graph holds the complete in-edge
    list of each core vertex; halo rows are empty.  No feature data lives
    here.
    """

    part_id: int
    local_graph: Graph
    local_to_global: np.ndarray
    num_core: int
    edge_local_to_global: np.ndarray

    @property
    def num_halo(self) -> int:
        return int(self.local_to_global.size - self.num_core)

    def is_halo(self, local_ids) -> np.ndarray:
        return np.asarray(local_ids) >= self.num_core

    @property
    def core_global_range(self) -> tuple[int, int]:
        if self.num_core == 0:
            return 0, 0
        return int(self.local_to_global[0]), int(self.local_to_global[self.num_core - 1]) + 1


def load_edgelist(path) -> tuple[np.ndarray, int]:
    """Read ``src dst`` lines; returns ``(edges[E, 2], num_nodes)``.

    ``num_nodes`` is one more than the largest ID seen.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'src dst'")
            rows.append((int(parts[0]), int(parts[1])))
    edges = np.array(rows, dtype=ID_DTYPE).reshape(-1, 2)
    if edges.size and edges.min() < 0:
        raise ValueError(f"{path}: negative node ID")
    num_nodes = int(edges.max()) + 1 if edges.size else 0
    return edges, num_nodes


def save_edgelist(path, edges) -> None:
    edges = np.asarray(edges, dtype=ID_DTYPE).reshape(-1, 2)
    with open(path, "w") as fh:
        for s, d in edges:
            fh.write(f"{s} {d}\n")


def symmetrize(edges) -> np.ndarray:
    """Emit both directions of every undirected edge."""
    edges = np.asarray(edges, dtype=ID_DTYPE).reshape(-1, 2)
    return np.concatenate([edges, edges[:, ::-1]], axis=0)
