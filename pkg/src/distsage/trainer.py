"""Synchronous mini-batch training across machines.

Dense gradients are averaged with a deterministic allreduce after every
iteration, so all replicas stay bitwise identical.  Sparse embedding
gradients are pushed to the KVStore without waiting (Hogwild) and only
drained at the end of an epoch.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field

import numpy as np

from . import rpc
from .graph import ID_DTYPE, PartitionBook
from .kvstore import KVClient, SparseOptimizerSpec
from .rpc import MsgType, TransportError
from .sage import Momentum, SageParams, cross_entropy, init_params, sage_backward, sage_forward
from .sampler import ALL_NEIGHBORS, DistSampler, Prefetcher

logger = logging.getLogger(__name__)

COLLECTIVE_TIMEOUT = 300.0


# --- workload split -----------------------------------------------------------

def assign_chunks(chunks, book: PartitionBook) -> np.ndarray:
    """Give each ID chunk to the machine whose partition overlaps it most.

    Pairs are taken in order of decreasing overlap (ties: lower machine,
    then lower chunk), one chunk per machine.
    """
    m = book.num_parts
    overlap = np.zeros((len(chunks), m), dtype=np.int64)
    for i, c in enumerate(chunks):
        if len(c):
            overlap[i] = np.bincount(book.nid2partid(c), minlength=m)
    order = sorted(((-overlap[i, p], p, i) for i in range(len(chunks)) for p in range(m)))
    owner = np.full(len(chunks), -1, dtype=np.int64)
    taken = set()
    for _, p, i in order:
        if owner[i] == -1 and p not in taken:
            owner[i] = p
            taken.add(p)
    return owner


def split_training_set(book: PartitionBook, train_mask, trainers_per_machine: int = 1) -> list:
    """Per-trainer training IDs, indexed by ``machine * T + local_rank``."""
    train_ids = np.flatnonzero(np.asarray(train_mask)).astype(ID_DTYPE)
    m, t = book.num_parts, trainers_per_machine
    if m * t > train_ids.size:
        raise ValueError(f"{m * t} trainers but only {train_ids.size} training vertices")
    chunks = np.array_split(train_ids, m)
    owner = assign_chunks(chunks, book)
    per_machine = [None] * m
    for i, p in enumerate(owner):
        per_machine[p] = chunks[i]
    return [per_machine[p][r::t] for p in range(m) for r in range(t)]


# --- collectives ----------------------------------------------------------------

def tree_mean(vectors) -> np.ndarray:
    """Pairwise reduction in rank order, then divide: identical on every member."""
    level = [np.asarray(v, dtype=np.float32) for v in vectors]
    n = len(level)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return (level[0] / np.float32(n)).astype(np.float32)


class AllreduceCoordinator:
    """Gathers one contribution per rank for each op and answers everyone at once."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self._ops: dict[int, dict] = {}
        self._lock = threading.Lock()
        self._broken: str | None = None

    def contribute(self, op_id: int, rank: int, vec: np.ndarray, conn=None) -> Future:
        fut: Future = Future()
        with self._lock:
            if self._broken:
                fut.set_exception(TransportError(self._broken))
                return fut
            st = self._ops.setdefault(op_id, {"vecs": {}, "waiters": []})
            if rank in st["vecs"]:
                fut.set_exception(ValueError(f"rank {rank} contributed twice to op {op_id}"))
                return fut
            if st["vecs"] and next(iter(st["vecs"].values())).shape != vec.shape:
                fut.set_exception(ValueError("allreduce length mismatch"))
                return fut
            st["vecs"][rank] = np.array(vec, dtype=np.float32)
            st["waiters"].append(fut)
            ready = len(st["vecs"]) == self.world_size
            if ready:
                del self._ops[op_id]
        if ready:
            result = tree_mean([st["vecs"][r] for r in range(self.world_size)])
            for w in st["waiters"]:
                w.set_result(result)
        return fut

    def handle(self, body: bytes, conn) -> Future:
        op_id, rank, vec = rpc.unpack(body)
        inner = self.contribute(op_id, rank, vec, conn)
        outer: Future = Future()

        def relay(f):
            exc = f.exception()
            if exc is None:
                outer.set_result(rpc.pack(f.result()))
            else:
                outer.set_exception(exc)
        inner.add_done_callback(relay)
        return outer

    def abort(self, reason: str) -> None:
        with self._lock:
            self._broken = reason
            ops, self._ops = self._ops, {}
        for st in ops.values():
            for w in st["waiters"]:
                if not w.done():
                    w.set_exception(TransportError(reason))

    def on_disconnect(self, conn) -> None:
        with self._lock:
            pending = bool(self._ops)
        if pending:
            self.abort(f"collective member at {conn.peer} disconnected")


class CollectiveGroup:
    """One member's handle on the group-wide allreduce."""

    def __init__(self, rank: int, world_size: int, coordinator: AllreduceCoordinator | None = None,
                 client: rpc.Client | None = None, timeout: float = COLLECTIVE_TIMEOUT):
        if (coordinator is None) == (client is None):
            raise ValueError("need exactly one of coordinator or client")
        self.rank = rank
        self.world_size = world_size
        self.coordinator = coordinator
        self.client = client
        self.timeout = timeout
        self._op = 0

    def allreduce(self, vec) -> np.ndarray:
        """Elementwise mean across all members (collective: every member must call)."""
        vec = np.ascontiguousarray(vec, dtype=np.float32).ravel()
        if self.world_size == 1:
            return vec.copy()
        op_id = self._op
        self._op += 1
        if self.coordinator is not None:
            fut = self.coordinator.contribute(op_id, self.rank, vec)
            try:
                return fut.result(timeout=self.timeout)
            except FutureTimeout:
                raise TransportError(f"allreduce {op_id} timed out") from None
        (out,) = rpc.unpack(self.client.call(MsgType.ALLREDUCE_SEG, rpc.pack(op_id, self.rank, vec),
                                             timeout=self.timeout))
        return np.array(out, dtype=np.float32)

    def barrier(self) -> None:
        self.allreduce(np.zeros(1, dtype=np.float32))


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    fanouts: tuple = (15, 10, 5)
    hidden: int = 256
    batch_size: int = 2000
    epochs: int = 1
    lr: float = 0.003
    momentum: float = 0.0
    mode: str = "feat"
    emb_dim: int = 16
    emb_lr: float = 0.1
    emb_optimizer: str = "adagrad"
    emb_init: float = 0.05
    seed: int = 0
    prefetch: int = 2
    max_inflight_push: int = 16
    eval_batch: int = 1000
    eval_every: int = 1
    debug_checksums: bool = False
    max_iters: int | None = None


@dataclass
class EpochStats:
    epoch: int = 0
    wall: float = 0.0
    sample: float = 0.0
    data_copy: float = 0.0
    forward_backward: float = 0.0
    sync: float = 0.0
    iterations: int = 0
    seeds_seen: int = 0
    losses: list = field(default_factory=list)
    checksums: list = field(default_factory=list)
    local_inputs: int = 0
    total_inputs: int = 0
    val_acc: float = float("nan")
    test_acc: float = float("nan")

    @property
    def local_fraction(self) -> float:
        return self.local_inputs / self.total_inputs if self.total_inputs else float("nan")

    def record(self) -> str:
        fields = [
            ("epoch", self.epoch), ("wall", f"{self.wall:.6f}"), ("sample", f"{self.sample:.6f}"),
            ("data_copy", f"{self.data_copy:.6f}"), ("forward_backward", f"{self.forward_backward:.6f}"),
            ("sync", f"{self.sync:.6f}"), ("iterations", self.iterations),
            ("loss", f"{self.losses[-1]:.6f}" if self.losses else "nan"),
            ("local_fraction", f"{self.local_fraction:.6f}"),
            ("val_acc", f"{self.val_acc:.6f}"), ("test_acc", f"{self.test_acc:.6f}"),
        ]
        return " ".join(f"{k}={v}" for k, v in fields)


def _seed_mix(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


class TrainerContext:
    """Everything one trainer needs: clients, its shard and model replica."""

    def __init__(self, rank: int, world_size: int, machine_id: int, book: PartitionBook, kv: KVClient,
                 sampler: DistSampler, group: CollectiveGroup, cfg: TrainConfig, num_classes: int,
                 in_dim: int, train_ids: np.ndarray, shard_sizes: list, eval_ids: dict):
        self.rank = rank
        self.world_size = world_size
        self.machine_id = machine_id
        self.book = book
        self.kv = kv
        self.sampler = sampler
        self.group = group
        self.cfg = cfg
        self.num_classes = num_classes
        self.train_ids = np.asarray(train_ids, dtype=ID_DTYPE)
        self.shard_sizes = shard_sizes
        self.eval_ids = eval_ids
        dims = [in_dim] + [cfg.hidden] * (len(cfg.fanouts) - 1) + [num_classes]
        self.params: SageParams = init_params(dims, cfg.seed)
        self.opt = Momentum(self.params, cfg.lr, cfg.momentum)
        self.input_tensor = "emb" if cfg.mode == "embed" else "feat"
        self._inflight: deque = deque()

    @property
    def iters_per_epoch(self) -> int:
        n = -(-max(self.shard_sizes) // self.cfg.batch_size)
        return n if self.cfg.max_iters is None else min(n, self.cfg.max_iters)

    def epoch_batches(self, epoch: int) -> list:
        rng = np.random.default_rng(_seed_mix(self.cfg.seed, epoch, self.rank, 17))
        order = rng.permutation(self.train_ids)
        n_iter = -(-max(self.shard_sizes) // self.cfg.batch_size)
        batches = np.array_split(order, n_iter)
        return batches[: self.iters_per_epoch]

    def iteration_seed(self, epoch: int, it: int) -> int:
        return _seed_mix(self.cfg.seed, epoch, it, 29)

    def drain_pushes(self) -> None:
        while self._inflight:
            for h in self._inflight.popleft():
                h.wait()

    def _push_async(self, ids, grads) -> None:
        while len(self._inflight) >= self.cfg.max_inflight_push:
            for h in self._inflight.popleft():
                h.wait()
        self._inflight.append(self.kv.push(self.input_tensor, ids, grads, wait=False))

    def compute_gradients(self, batch, stats: EpochStats | None = None):
        """Forward/backward on one mini-batch.

        Returns (summed dense gradient as a flat vector, number of seeds,
        loss, input-node gradients).
        """
        t0 = time.perf_counter()
        feats = self.kv.pull(self.input_tensor, batch.input_nodes)
        labels = self.kv.pull("label", batch.seeds)[:, 0].astype(np.int64)
        t1 = time.perf_counter()
        logits, tape = sage_forward(self.params, batch.blocks, feats)
        loss, dlogits = cross_entropy(logits, labels)
        n = labels.size
        grads, dinput = sage_backward(self.params, tape, dlogits)
        t2 = time.perf_counter()
        if stats is not None:
            stats.data_copy += t1 - t0
            stats.forward_backward += t2 - t1
            owners = self.book.nid2partid(batch.input_nodes)
            stats.local_inputs += int(np.count_nonzero(owners == self.machine_id))
            stats.total_inputs += int(batch.input_nodes.size)
        return grads.flatten() * np.float32(n), n, loss, dinput

    def apply_global_gradient(self, summed: np.ndarray, count: int, stats: EpochStats | None = None):
        t0 = time.perf_counter()
        reduced = self.group.allreduce(np.concatenate([summed, np.array([count], dtype=np.float32)]))
        t1 = time.perf_counter()
        total = reduced[-1]
        grad = reduced[:-1] / total if total > 0 else np.zeros_like(reduced[:-1])
        self.params = self.opt.step(self.params, self.params.unflatten(grad))
        if stats is not None:
            stats.sync += t1 - t0 + (time.perf_counter() - t1)
        return grad

    def train_epoch(self, epoch: int) -> EpochStats:
        cfg = self.cfg
        stats = EpochStats(epoch=epoch)
        start = time.perf_counter()
        batches = self.epoch_batches(epoch)
        dim = self.params.w_self[0].shape[0]

        def sample(job):
            it, seeds = job
            if seeds.size == 0:
                return None
            return self.sampler.sample_minibatch(seeds, cfg.fanouts, self.iteration_seed(epoch, it))

        fetch = iter(Prefetcher(sample, list(enumerate(batches)), cfg.prefetch))
        for it in range(len(batches)):
            t0 = time.perf_counter()
            batch = next(fetch)
            stats.sample += time.perf_counter() - t0
            if batch is None:
                summed, n, loss = np.zeros(self.params.flatten().size, dtype=np.float32), 0, float("nan")
            else:
                summed, n, loss, dinput = self.compute_gradients(batch, stats)
                if cfg.mode == "embed":
                    self._push_async(batch.input_nodes, dinput.reshape(-1, dim))
            self.apply_global_gradient(summed, n, stats)
            stats.iterations += 1
            stats.seeds_seen += n
            stats.losses.append(loss)
            if cfg.debug_checksums:
                stats.checksums.append(self.params.checksum())
        for _ in fetch:
            pass
        self.drain_pushes()
        stats.wall = time.perf_counter() - start
        return stats

    def evaluate(self, split: str = "test") -> float:
        """Full-neighbour accuracy over one split (collective)."""
        ids = self.eval_ids[split]
        correct = 0
        fanouts = [ALL_NEIGHBORS] * len(self.cfg.fanouts)
        for lo in range(0, ids.size, self.cfg.eval_batch):
            seeds = ids[lo:lo + self.cfg.eval_batch]
            batch = self.sampler.sample_minibatch(seeds, fanouts, 0)
            feats = self.kv.pull(self.input_tensor, batch.input_nodes)
            labels = self.kv.pull("label", batch.seeds)[:, 0].astype(np.int64)
            logits, _ = sage_forward(self.params, batch.blocks, feats)
            correct += int(np.count_nonzero(logits.argmax(axis=1) == labels))
        red = self.group.allreduce(np.array([correct, ids.size], dtype=np.float32)) * self.world_size
        return float(red[0] / red[1]) if red[1] > 0 else float("nan")


def reduce_stats(ctx: TrainerContext, stats: EpochStats) -> EpochStats:
    """Average the phase timers and sum the locality counts over all trainers."""
    vec = np.array([stats.wall, stats.sample, stats.data_copy, stats.forward_backward, stats.sync,
                    stats.local_inputs, stats.total_inputs,
                    stats.losses[-1] if stats.losses and np.isfinite(stats.losses[-1]) else 0.0],
                   dtype=np.float64)
    red = ctx.group.allreduce(vec.astype(np.float32)).astype(np.float64)
    out = EpochStats(epoch=stats.epoch, wall=red[0], sample=red[1], data_copy=red[2], forward_backward=red[3],
                     sync=red[4], iterations=stats.iterations, seeds_seen=stats.seeds_seen,
                     losses=list(stats.losses), checksums=list(stats.checksums),
                     local_inputs=int(round(red[5] * ctx.world_size)),
                     total_inputs=int(round(red[6] * ctx.world_size)))
    out.val_acc, out.test_acc = stats.val_acc, stats.test_acc
    return out


def embedding_spec(cfg: TrainConfig) -> SparseOptimizerSpec:
    return SparseOptimizerSpec(cfg.emb_optimizer, cfg.emb_lr)
