"""Partitioned in-memory tensor store.

Each machine runs one :class:`KVServer` holding the rows of its core
vertices (or owned edges) for every registered tensor.  A
:class:`KVClient` routes pulls and pushes to owners through the partition
book; rows owned by the co-located server are read in-process without
touching the wire.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass

import numpy as np

from . import rpc
from .graph import ID_DTYPE, PartitionBook
from .rpc import MsgType


class PartitionPolicy:
    """Maps global node or edge IDs of one book onto servers."""

    def __init__(self, kind: str, book: PartitionBook):
        if kind not in ("node", "edge"):
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.book = book
        self.starts = book.node_range_starts if kind == "node" else book.edge_range_starts

    def owner(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=ID_DTYPE)
        if ids.size and (ids.min() < 0 or ids.max() >= self.starts[-1]):
            raise IndexError(f"{self.kind} ID out of range [0, {int(self.starts[-1])})")
        return np.searchsorted(self.starts, ids, side="right") - 1

    def to_local(self, ids, part: int) -> np.ndarray:
        return np.asarray(ids, dtype=ID_DTYPE) - self.starts[part]

    def num_rows(self, part: int) -> int:
        return int(self.starts[part + 1] - self.starts[part])


@dataclass(frozen=True)
class SparseOptimizerSpec:
    kind: str = "adagrad"
    learning_rate: float = 0.1
    adagrad_eps: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("sgd", "adagrad"):
            raise ValueError(f"unknown sparse optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


class TensorShard:
    def __init__(self, name: str, policy: PartitionPolicy, rows: np.ndarray,
                 opt: SparseOptimizerSpec | None = None):
        self.name = name
        self.policy = policy
        self.rows = np.ascontiguousarray(rows, dtype=np.float32)
        self.opt = opt
        self.state = np.zeros_like(self.rows) if opt is not None and opt.kind == "adagrad" else None
        # one lock per shard: row updates are never observed half-applied
        self.lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def trainable(self) -> bool:
        return self.opt is not None

    def read(self, local_ids: np.ndarray) -> np.ndarray:
        with self.lock:
            return self.rows[local_ids]

    def apply(self, local_ids: np.ndarray, grads: np.ndarray) -> None:
        if self.opt is None:
            raise PermissionError(f"tensor {self.name!r} is not trainable")
        uniq, inv = np.unique(local_ids, return_inverse=True)
        agg = np.zeros((uniq.size, self.dim), dtype=np.float32)
        np.add.at(agg, inv, grads)
        lr = np.float32(self.opt.learning_rate)
        with self.lock:
            if self.opt.kind == "sgd":
                self.rows[uniq] -= lr * agg
            else:
                st = self.state[uniq] + agg * agg
                self.state[uniq] = st
                self.rows[uniq] -= lr * agg / (np.sqrt(st) + np.float32(self.opt.adagrad_eps))


def _init_rows(init, shape, seed: int, server_id: int, name: str) -> np.ndarray:
    if init is None or init == "zero":
        return np.zeros(shape, dtype=np.float32)
    kind, lo, hi = init
    if kind != "uniform":
        raise ValueError(f"unknown init {init!r}")
    rng = np.random.default_rng([seed, server_id, zlib.crc32(name.encode())])
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


class KVServer:
    """Shard storage for one partition plus its RPC handlers."""

    def __init__(self, server_id: int, book: PartitionBook, seed: int = 0):
        self.server_id = server_id
        self.book = book
        self.seed = seed
        self.shards: dict[str, TensorShard] = {}
        self._reg_lock = threading.Lock()

    def _policy(self, kind: str) -> PartitionPolicy:
        return PartitionPolicy(kind, self.book)

    def register(self, name: str, kind: str, dim: int, init=None, trainable: bool = False,
                 opt: SparseOptimizerSpec | None = None) -> TensorShard:
        if dim <= 0:
            raise ValueError("dim must be positive")
        if trainable != (opt is not None):
            raise ValueError("an optimizer is required exactly when the tensor is trainable")
        policy = self._policy(kind)
        rows = _init_rows(init, (policy.num_rows(self.server_id), dim), self.seed, self.server_id, name)
        return self._add(TensorShard(name, policy, rows, opt))

    def load(self, name: str, kind: str, data: np.ndarray) -> TensorShard:
        """Install pre-partitioned rows (features, labels) for this server."""
        policy = self._policy(kind)
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] != policy.num_rows(self.server_id):
            raise ValueError(f"{name}: expected {policy.num_rows(self.server_id)} rows, got {data.shape[0]}")
        return self._add(TensorShard(name, policy, data))

    def _add(self, shard: TensorShard) -> TensorShard:
        with self._reg_lock:
            if shard.name in self.shards:
                raise KeyError(f"tensor {shard.name!r} already registered")
            self.shards[shard.name] = shard
        return shard

    def shard(self, name: str) -> TensorShard:
        try:
            return self.shards[name]
        except KeyError:
            raise KeyError(f"unknown tensor {name!r}") from None

    def _local_ids(self, shard: TensorShard, gids) -> np.ndarray:
        gids = np.asarray(gids, dtype=ID_DTYPE)
        owners = shard.policy.owner(gids)
        if np.any(owners != self.server_id):
            raise LookupError(f"IDs not owned by server {self.server_id}")
        return shard.policy.to_local(gids, self.server_id)

    def read_global(self, name: str, gids) -> np.ndarray:
        shard = self.shard(name)
        return shard.read(self._local_ids(shard, gids))

    def update_global(self, name: str, gids, grads) -> None:
        shard = self.shard(name)
        grads = np.asarray(grads, dtype=np.float32)
        gids = np.asarray(gids, dtype=ID_DTYPE)
        if grads.shape != (gids.size, shard.dim):
            raise ValueError(f"gradient shape {grads.shape} != ({gids.size}, {shard.dim})")
        shard.apply(self._local_ids(shard, gids), grads)

    # RPC side
    def handle_pull(self, body: bytes, conn=None) -> bytes:
        name, gids = rpc.unpack(body)
        return rpc.pack(self.read_global(name, gids))

    def handle_push(self, body: bytes, conn=None) -> bytes:
        name, gids, grads = rpc.unpack(body)
        self.update_global(name, gids, grads)
        return b""

    def handle_register(self, body: bytes, conn=None) -> bytes:
        name, kind, dim, init_kind, lo, hi, trainable, opt_kind, lr, eps = rpc.unpack(body)
        init = None if init_kind == "zero" else (init_kind, lo, hi)
        opt = SparseOptimizerSpec(opt_kind, lr, eps) if trainable else None
        self.register(name, kind, dim, init, bool(trainable), opt)
        return b""

    def handlers(self) -> dict:
        return {MsgType.PULL: self.handle_pull, MsgType.PUSH: self.handle_push,
                MsgType.REGISTER: self.handle_register}


class KVClient:
    """Routes pull/push by owner; co-located rows use the in-process path.

    ``remotes`` maps server id to an :class:`rpc.Client`; ``local`` is the
    co-located server (or ``None``).
    """

    def __init__(self, machine_id: int, book: PartitionBook, local: KVServer | None,
                 remotes: dict[int, rpc.Client]):
        self.machine_id = machine_id
        self.book = book
        self.local = local
        self.remotes = remotes
        self._kinds: dict[str, tuple[str, int]] = {}
        self.local_rows = 0
        self.remote_rows = 0
        self._count_lock = threading.Lock()

    def _meta(self, name: str) -> tuple[str, int]:
        if name in self._kinds:
            return self._kinds[name]
        if self.local is not None and name in self.local.shards:
            sh = self.local.shards[name]
            return sh.policy.kind, sh.dim
        raise KeyError(f"unknown tensor {name!r}")

    def declare(self, name: str, kind: str, dim: int) -> None:
        self._kinds[name] = (kind, dim)

    def register(self, name: str, kind: str, dim: int, init=None, trainable: bool = False,
                 opt: SparseOptimizerSpec | None = None) -> None:
        """Allocate the tensor on every server."""
        if trainable != (opt is not None):
            raise ValueError("an optimizer is required exactly when the tensor is trainable")
        init_kind, lo, hi = ("zero", 0.0, 0.0) if init in (None, "zero") else init
        body = rpc.pack(name, kind, dim, init_kind, float(lo), float(hi), int(trainable),
                        opt.kind if opt else "sgd", opt.learning_rate if opt else 1.0,
                        opt.adagrad_eps if opt else 0.0)
        pending = [c.call_async(MsgType.REGISTER, body) for p, c in sorted(self.remotes.items())
                   if p != self.machine_id]
        if self.local is not None:
            self.local.register(name, kind, dim, None if init_kind == "zero" else init, trainable, opt)
        for p in pending:
            p.wait()
        self.declare(name, kind, dim)

    def _policy(self, name: str) -> PartitionPolicy:
        return PartitionPolicy(self._meta(name)[0], self.book)

    def local_fast_path(self, name: str, gids) -> np.ndarray:
        """Rows owned by the co-located server, read without serialization."""
        if self.local is None:
            raise LookupError("no co-located server")
        gids = np.asarray(gids, dtype=ID_DTYPE)
        if gids.size == 0:
            return np.zeros((0, self._meta(name)[1]), dtype=np.float32)
        return self.local.read_global(name, gids)

    def pull(self, name: str, gids) -> np.ndarray:
        kind, dim = self._meta(name)
        gids = np.asarray(gids, dtype=ID_DTYPE)
        out = np.empty((gids.size, dim), dtype=np.float32)
        if gids.size == 0:
            return out
        owners = PartitionPolicy(kind, self.book).owner(gids)
        pending = []
        for p in np.unique(owners):
            p = int(p)
            if p == self.machine_id and self.local is not None:
                continue
            pos = np.flatnonzero(owners == p)
            uniq, inv = np.unique(gids[pos], return_inverse=True)
            client = self.remotes.get(p)
            if client is None:
                raise rpc.TransportError(f"no route to server {p}")
            pending.append((pos, inv, client.call_async(MsgType.PULL, rpc.pack(name, uniq))))
        n_local = 0
        if self.local is not None:
            pos = np.flatnonzero(owners == self.machine_id)
            if pos.size:
                out[pos] = self.local_fast_path(name, gids[pos])
                n_local = pos.size
        for pos, inv, handle in pending:
            (rows,) = rpc.unpack(handle.wait())
            out[pos] = rows[inv]
        with self._count_lock:
            self.local_rows += n_local
            self.remote_rows += gids.size - n_local
        return out

    def push(self, name: str, gids, grads, wait: bool = True):
        """Send gradients to owners; with ``wait=False`` returns pending replies."""
        kind, dim = self._meta(name)
        gids = np.asarray(gids, dtype=ID_DTYPE)
        grads = np.asarray(grads, dtype=np.float32)
        if grads.shape != (gids.size, dim):
            raise ValueError(f"gradient shape {grads.shape} != ({gids.size}, {dim})")
        owners = PartitionPolicy(kind, self.book).owner(gids)
        pending = []
        for p in np.unique(owners):
            p = int(p)
            pos = np.flatnonzero(owners == p)
            uniq, inv = np.unique(gids[pos], return_inverse=True)
            agg = np.zeros((uniq.size, dim), dtype=np.float32)
            np.add.at(agg, inv, grads[pos])
            if p == self.machine_id and self.local is not None:
                self.local.update_global(name, uniq, agg)
            else:
                pending.append(self.remotes[p].call_async(MsgType.PUSH, rpc.pack(name, uniq, agg)))
        if wait:
            for h in pending:
                h.wait()
            return []
        return pending

    def reset_counters(self) -> None:
        with self._count_lock:
            self.local_rows = self.remote_rows = 0
