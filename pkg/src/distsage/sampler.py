"""Distributed fan-out neighbour sampling into layered bipartite blocks.

Sampling randomness is derived per edge from ``(rng_seed, layer, dst, eid)``
in original (pre-relabel) IDs: every in-edge of a target gets a 64-bit hash
key and the ``k`` smallest keys win, which is a uniform ``k``-subset without
replacement.  Because keys do not depend on where a vertex lives or how
its row is ordered, a mini-batch is identical for any partition layout.
"""

from __future__ import annotations

import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rpc
from .graph import ID_DTYPE, LocalPartition, PartitionBook
from .rpc import MsgType

ALL_NEIGHBORS = (1 << 62)

_M64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def edge_keys(rng_seed: int, layer: int, dst_orig: np.ndarray, eid_orig: np.ndarray) -> np.ndarray:
    base = np.full(dst_orig.shape, (int(rng_seed) * 0x100000001B3 + int(layer)) & _M64, dtype=np.uint64)
    h = _mix64(base)
    h = _mix64(h ^ dst_orig.astype(np.uint64))
    return _mix64(h ^ eid_orig.astype(np.uint64))


def _segments(starts: np.ndarray, degs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat CSR positions of the given rows and the row index of each."""
    total = int(degs.sum())
    seg = np.repeat(np.arange(degs.size), degs)
    offs = np.arange(total) - np.repeat(np.cumsum(degs) - degs, degs)
    return starts[seg] + offs, seg


def sample_neighbors_local(part: LocalPartition, book: PartitionBook, seeds, k: int, rng_seed: int,
                           layer: int = 0):
    """Sample at most ``k`` in-edges of each core seed (local IDs).

    Returns ``(src, dst, eid)`` in global IDs, grouped by seed in the given
    order; sources may be halo vertices.
    """
    seeds = np.asarray(seeds, dtype=ID_DTYPE)
    if seeds.size and (seeds.min() < 0 or seeds.max() >= part.num_core):
        raise ValueError(f"seed is not a core vertex of partition {part.part_id}")
    if k < 1:
        raise ValueError("fan-out must be >= 1")
    g = part.local_graph
    starts = g.row_offsets[seeds]
    degs = g.row_offsets[seeds + 1] - starts
    pos, seg = _segments(starts, degs)
    src = part.local_to_global[g.col_indices[pos]]
    dst = part.local_to_global[seeds][seg]
    eid = part.edge_local_to_global[g.edge_ids[pos]]
    big = degs[seg] > k
    if big.any():
        bpos = np.flatnonzero(big)
        keys = edge_keys(rng_seed, layer, book.node_perm_inv[dst[bpos]], book.edge_perm_inv[eid[bpos]])
        order = np.lexsort((keys, seg[bpos]))
        sseg = seg[bpos][order]
        first = np.searchsorted(sseg, sseg, side="left")
        rank = np.empty(bpos.size, dtype=np.int64)
        rank[order] = np.arange(bpos.size) - first
        keep = np.ones(src.size, dtype=bool)
        keep[bpos] = rank < k
        src, dst, eid = src[keep], dst[keep], eid[keep]
    return src, dst, eid


class SamplerService:
    """Answers SAMPLE requests against one immutable partition."""

    def __init__(self, part: LocalPartition, book: PartitionBook):
        self.part = part
        self.book = book

    def sample(self, seeds_local, k, rng_seed, layer):
        return sample_neighbors_local(self.part, self.book, seeds_local, k, rng_seed, layer)

    def handle_sample(self, body: bytes, conn=None) -> bytes:
        layer, k, rng_seed, seeds = rpc.unpack(body)
        src, dst, eid = self.sample(seeds, k, rng_seed, layer)
        return rpc.pack(src, dst, eid)

    def handlers(self) -> dict:
        return {MsgType.SAMPLE: self.handle_sample}


def encode_sample_request(layer: int, k: int, rng_seed: int, seeds_local) -> bytes:
    return rpc.pack(int(layer), int(k), int(rng_seed), np.asarray(seeds_local, dtype=ID_DTYPE))


@dataclass
class Block:
    """Bipartite layer: ``src_nodes[:num_dst]`` are the destinations."""

    src_nodes: np.ndarray
    num_dst: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_ids: np.ndarray

    @property
    def dst_nodes(self) -> np.ndarray:
        return self.src_nodes[: self.num_dst]

    @property
    def num_src(self) -> int:
        return int(self.src_nodes.size)

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.size)


@dataclass
class MiniBatchGraph:
    blocks: list

    @property
    def seeds(self) -> np.ndarray:
        return self.blocks[-1].dst_nodes

    @property
    def input_nodes(self) -> np.ndarray:
        return self.blocks[0].src_nodes

    def validate(self) -> None:
        for i, b in enumerate(self.blocks):
            if b.edge_dst.size and b.edge_dst.max() >= b.num_dst:
                raise AssertionError(f"block {i}: edge dst index out of range")
            if b.edge_src.size and b.edge_src.max() >= b.num_src:
                raise AssertionError(f"block {i}: edge src index out of range")
            if i + 1 < len(self.blocks) and not np.array_equal(b.dst_nodes, self.blocks[i + 1].src_nodes):
                raise AssertionError(f"block {i} destinations do not match block {i + 1} sources")


def unique_stable(ids: np.ndarray) -> np.ndarray:
    uniq, first = np.unique(ids, return_index=True)
    return ids[np.sort(first)]


def make_block(dst_nodes: np.ndarray, src: np.ndarray, dst: np.ndarray, eid: np.ndarray) -> Block:
    combined = np.concatenate([dst_nodes, src])
    src_nodes = unique_stable(combined)
    order = np.argsort(src_nodes, kind="stable")
    sorted_ids = src_nodes[order]

    def index_of(x):
        return order[np.searchsorted(sorted_ids, x)]

    return Block(src_nodes, int(dst_nodes.size), index_of(src).astype(ID_DTYPE),
                 index_of(dst).astype(ID_DTYPE), np.asarray(eid, dtype=ID_DTYPE))


class DistSampler:
    """Builds mini-batches by fanning requests out to every owning partition."""

    def __init__(self, machine_id: int, book: PartitionBook, local: SamplerService | None,
                 remotes: dict[int, rpc.Client]):
        self.machine_id = machine_id
        self.book = book
        self.local = local
        self.remotes = remotes

    def sample_layer(self, frontier, k: int, rng_seed: int, layer: int):
        frontier = np.asarray(frontier, dtype=ID_DTYPE)
        owners = self.book.nid2partid(frontier)
        parts = [int(p) for p in np.unique(owners)]
        results: dict[int, tuple] = {}
        pending = []
        # remote requests go out before local work so their latency overlaps it
        for p in parts:
            if p == self.machine_id and self.local is not None:
                continue
            local_ids = frontier[owners == p] - self.book.node_range_starts[p]
            client = self.remotes.get(p)
            if client is None:
                raise rpc.TransportError(f"no route to sampler {p}")
            pending.append((p, client.call_async(MsgType.SAMPLE, encode_sample_request(layer, k, rng_seed, local_ids))))
        if self.local is not None and self.machine_id in parts:
            local_ids = frontier[owners == self.machine_id] - self.book.node_range_starts[self.machine_id]
            results[self.machine_id] = self.local.sample(local_ids, k, rng_seed, layer)
        for p, handle in pending:
            results[p] = tuple(rpc.unpack(handle.wait()))
        if not parts:
            empty = np.zeros(0, dtype=ID_DTYPE)
            return empty, empty, empty
        cols = list(zip(*(results[p] for p in parts)))
        return tuple(np.concatenate(c).astype(ID_DTYPE) for c in cols)

    def sample_minibatch(self, seeds, fanouts, rng_seed: int) -> MiniBatchGraph:
        """Recursive sampling; ``fanouts[-1]`` applies to the seeds' layer."""
        if any(int(f) < 1 for f in fanouts):
            raise ValueError("fan-outs must be >= 1")
        dst_nodes = unique_stable(np.asarray(seeds, dtype=ID_DTYPE))
        if dst_nodes.size == 0:
            raise ValueError("empty seed set")
        blocks = []
        for layer in range(len(fanouts) - 1, -1, -1):
            src, dst, eid = self.sample_layer(dst_nodes, int(fanouts[layer]), rng_seed, layer)
            block = make_block(dst_nodes, src, dst, eid)
            blocks.append(block)
            dst_nodes = block.src_nodes
        blocks.reverse()
        return MiniBatchGraph(blocks)


class Prefetcher:
    """Runs ``fn(item)`` up to ``depth`` items ahead; yields results in order."""

    def __init__(self, fn, items, depth: int = 2):
        self.fn = fn
        self.items = iter(items)
        self.depth = max(1, depth)
        self._pool = ThreadPoolExecutor(max_workers=self.depth, thread_name_prefix="prefetch")
        self._queue: deque = deque()
        self._lock = threading.Lock()

    def _fill(self) -> None:
        while len(self._queue) < self.depth:
            try:
                item = next(self.items)
            except StopIteration:
                return
            self._queue.append(self._pool.submit(self.fn, item))

    def __iter__(self):
        try:
            self._fill()
            while self._queue:
                fut = self._queue.popleft()
                self._fill()
                yield fut.result()
        finally:
            for f in self._queue:
                f.cancel()
            self._pool.shutdown(wait=True)
