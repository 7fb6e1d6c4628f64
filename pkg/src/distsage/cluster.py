"""Machine runtime and cluster launchers.

A machine owns one partition and runs, inside one process, the RPC server
(KVStore + sampler, plus the collective coordinator on rank 0) and its
trainer threads.  Clusters run either as threads of one process
(:func:`run_local_cluster`) or as one OS process per machine
(:func:`run_machine_process`, spawned by ``launch``); both talk over
loopback sockets.
"""

from __future__ import annotations

import logging
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats, rpc
from .datasets import Dataset
from .graph import ID_DTYPE, LocalPartition, PartitionBook
from .kvstore import KVClient, KVServer
from .partition import (BalanceConstraints, PartitionReport, build_partitions, partition,
                        partition_stats, random_partition)
from .rpc import MsgType
from .sampler import DistSampler, SamplerService
from .trainer import (AllreduceCoordinator, CollectiveGroup, EpochStats, TrainConfig, TrainerContext,
                      embedding_spec, reduce_stats, split_training_set)

logger = logging.getLogger(__name__)

MASKS = ("train_mask", "val_mask", "test_mask")


@dataclass
class PartitionedDataset:
    """Partitions plus node data re-indexed by relabeled global ID."""

    parts: list
    book: PartitionBook
    node_data: dict
    features: np.ndarray | None
    report: PartitionReport | None = None

    @property
    def num_parts(self) -> int:
        return self.book.num_parts

    def machine_inputs(self, p: int):
        lo, hi = self.book.node_range(p)
        nd = {k: v[lo:hi] for k, v in self.node_data.items()}
        feats = None if self.features is None else self.features[lo:hi]
        return self.parts[p], self.book, nd, feats

    def save(self, root) -> None:
        formats.write_partition_dir(root, self.parts, self.book, self.node_data, self.features)
        if self.report is not None:
            (Path(root) / "stats.txt").write_text(self.report.to_text())

    @classmethod
    def load(cls, root, num_parts: int | None = None) -> "PartitionedDataset":
        book = formats.load_book(Path(root) / "book.mdg")
        k = book.num_parts if num_parts is None else num_parts
        parts, nds, feats = [], [], []
        for p in range(k):
            part, _, nd, f = formats.read_partition_dir(formats.part_dir(root, p))
            parts.append(part)
            nds.append(nd)
            feats.append(f)
        node_data = {key: np.concatenate([nd[key] for nd in nds]) for key in nds[0]} if nds[0] else {}
        features = None if feats[0] is None else np.concatenate(feats)
        return cls(parts, book, node_data, features)


def balance_constraints(ds: Dataset, k: int, eps: float = 0.05, edges: bool = False) -> BalanceConstraints:
    """Balance nodes and train/val/test counts; ``edges`` adds in-degree as a column."""
    masks = [ds.train_mask, ds.val_mask, ds.test_mask]
    if edges:
        masks.append(ds.graph().in_degrees())
    return BalanceConstraints.from_masks(k, *masks, tolerance=eps)


def partition_dataset(ds: Dataset, k: int, method: str = "metis", seed: int = 0, eps: float = 0.05,
                      constraints: BalanceConstraints | None = None) -> PartitionedDataset:
    g = ds.graph()
    if constraints is None:
        constraints = balance_constraints(ds, k, eps)
    if method == "metis":
        pa = partition(g, constraints, seed=seed)
    elif method == "random":
        pa = random_partition(g, k, seed, constraints)
    else:
        raise ValueError(f"unknown partition method {method!r}")
    parts, book, _ = build_partitions(g, pa.assign, k)
    inv = book.node_perm_inv
    node_data = {key: np.asarray(v)[inv] for key, v in ds.node_data().items()}
    feats = ds.features[inv] if ds.features.shape[1] else None
    return PartitionedDataset(parts, book, node_data, feats, partition_stats(pa.assign, g, constraints))


class Machine:
    def __init__(self, rank: int, part: LocalPartition, book: PartitionBook, node_data: dict,
                 features: np.ndarray | None, trainers_per_machine: int = 1, host: str = "127.0.0.1",
                 port: int = 0, seed: int = 0):
        self.rank = rank
        self.part = part
        self.book = book
        self.num_machines = book.num_parts
        self.trainers_per_machine = trainers_per_machine
        self.world_size = self.num_machines * trainers_per_machine
        self.kv = KVServer(rank, book, seed)
        if features is not None and features.shape[1]:
            self.kv.load("feat", "node", features)
        if "label" in node_data:
            self.kv.load("label", "node", node_data["label"])
        for key in MASKS:
            if key in node_data:
                self.kv.load(key, "node", node_data[key])
        self.sampler = SamplerService(part, book)
        handlers = {**self.kv.handlers(), **self.sampler.handlers(), MsgType.CONTROL: self._control}
        self.coordinator = None
        if rank == 0:
            self.coordinator = AllreduceCoordinator(self.world_size)
            handlers[MsgType.ALLREDUCE_SEG] = self.coordinator.handle
        self.server = rpc.Server(handlers, host, port, max_workers=max(8, 2 * self.world_size))
        if self.coordinator is not None:
            self.server.disconnect_hooks.append(self.coordinator.on_disconnect)
        self.clients: dict[int, rpc.Client] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self.server.address

    def _control(self, body: bytes, conn) -> bytes:
        (cmd,) = rpc.unpack(body)
        if cmd == "ping":
            return rpc.pack("pong", self.rank)
        raise ValueError(f"unknown control command {cmd!r}")

    def connect(self, addresses, wait: float = 30.0) -> None:
        deadline = time.monotonic() + wait
        for p, (host, port) in enumerate(addresses):
            if p == self.rank:
                continue
            while True:
                try:
                    self.clients[p] = rpc.Client(host, port)
                    break
                except rpc.TransportError:
                    if time.monotonic() > deadline:
                        raise
                    time.sleep(0.1)

    def group(self, rank: int) -> CollectiveGroup:
        if self.coordinator is not None:
            return CollectiveGroup(rank, self.world_size, coordinator=self.coordinator)
        return CollectiveGroup(rank, self.world_size, client=self.clients[0])

    def trainer_context(self, local_rank: int, cfg: TrainConfig) -> TrainerContext:
        rank = self.rank * self.trainers_per_machine + local_rank
        kv = KVClient(self.rank, self.book, self.kv, self.clients)
        sampler = DistSampler(self.rank, self.book, self.sampler, self.clients)
        everyone = np.arange(self.book.num_nodes, dtype=ID_DTYPE)
        masks = {k: kv.pull(k, everyone)[:, 0] > 0 for k in MASKS}
        labels = kv.pull("label", everyone)[:, 0]
        num_classes = int(labels.max()) + 1
        shards = split_training_set(self.book, masks["train_mask"], self.trainers_per_machine)
        eval_ids = {}
        lo, hi = self.book.node_range(self.rank)
        for split in ("val", "test"):
            mine = np.flatnonzero(masks[f"{split}_mask"][lo:hi]).astype(ID_DTYPE) + lo
            eval_ids[split] = mine[local_rank::self.trainers_per_machine]
        if cfg.mode == "embed":
            in_dim = cfg.emb_dim
        else:
            in_dim = self.kv.shard("feat").dim
        return TrainerContext(rank, self.world_size, self.rank, self.book, kv, sampler, self.group(rank), cfg,
                              num_classes, in_dim, shards[rank], [len(s) for s in shards], eval_ids)

    def close(self) -> None:
        for c in self.clients.values():
            c.close()
        self.server.close()

    def shutdown(self, wait: float = 10.0) -> None:
        """Close after peers are done with us (rank 0 waits for their disconnect)."""
        if self.rank == 0:
            for c in self.clients.values():
                c.close()
            deadline = time.monotonic() + wait
            while self.server.num_connections and time.monotonic() < deadline:
                time.sleep(0.05)
            self.server.close()
        else:
            self.close()


@dataclass
class TrainerResult:
    rank: int
    history: list = field(default_factory=list)
    params: object = None
    error: BaseException | None = None


def run_trainer(machine: Machine, local_rank: int, cfg: TrainConfig, on_epoch=None) -> TrainerResult:
    ctx = machine.trainer_context(local_rank, cfg)
    result = TrainerResult(ctx.rank)
    if cfg.mode == "embed":
        if ctx.rank == 0:
            init = ("uniform", -cfg.emb_init, cfg.emb_init)
            ctx.kv.register("emb", "node", cfg.emb_dim, init, True, embedding_spec(cfg))
        else:
            ctx.kv.declare("emb", "node", cfg.emb_dim)
    ctx.group.barrier()
    for epoch in range(cfg.epochs):
        stats = ctx.train_epoch(epoch)
        ctx.group.barrier()
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            stats.val_acc = ctx.evaluate("val")
            stats.test_acc = ctx.evaluate("test")
        reduced = reduce_stats(ctx, stats)
        result.history.append(reduced)
        if on_epoch is not None and ctx.rank == 0:
            on_epoch(reduced)
    ctx.group.barrier()
    result.params = ctx.params
    return result


def _run_threads(machines, cfg: TrainConfig, on_epoch=None) -> list:
    results: dict[int, TrainerResult] = {}
    errors = []

    def body(m, t):
        rank = m.rank * m.trainers_per_machine + t
        try:
            results[rank] = run_trainer(m, t, cfg, on_epoch)
        except BaseException as exc:  # surface the first failure, unblock the rest
            errors.append(exc)
            results[rank] = TrainerResult(rank, error=exc)
            coord = machines[0].coordinator
            if coord is not None:
                coord.abort(f"trainer {rank} failed: {exc}")

    threads = [threading.Thread(target=body, args=(m, t), name=f"trainer-{m.rank}-{t}")
               for m in machines for t in range(m.trainers_per_machine)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return [results[r] for r in sorted(results)]


def start_local_machines(pds: PartitionedDataset, trainers_per_machine: int = 1, seed: int = 0) -> list:
    machines = [Machine(p, *pds.machine_inputs(p), trainers_per_machine=trainers_per_machine, seed=seed)
                for p in range(pds.num_parts)]
    addrs = [m.address for m in machines]
    for m in machines:
        m.connect(addrs)
    return machines


def run_local_cluster(pds: PartitionedDataset, cfg: TrainConfig, trainers_per_machine: int = 1,
                      on_epoch=None) -> list:
    """Train with one thread-hosted machine per partition; returns per-trainer results."""
    machines = start_local_machines(pds, trainers_per_machine, cfg.seed)
    try:
        return _run_threads(machines, cfg, on_epoch)
    finally:
        for m in machines:
            m.close()


# --- multi-process ----------------------------------------------------------------

@dataclass
class ClusterEntry:
    host: str
    port: int
    part_path: str


def read_cluster_file(path) -> list:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        host, port, part_path = line.split()
        entries.append(ClusterEntry(host, int(port), part_path))
    return entries


def write_cluster_file(path, entries) -> None:
    Path(path).write_text("".join(f"{e.host} {e.port} {e.part_path}\n" for e in entries))


def free_ports(n: int) -> list:
    socks = [socket.socket() for _ in range(n)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def run_machine_process(rank: int, entries: list, cfg: TrainConfig, trainers_per_machine: int = 1,
                        metrics_out=None) -> list:
    entry = entries[rank]
    part, book, nd, feats = formats.read_partition_dir(entry.part_path)
    machine = Machine(rank, part, book, nd, feats, trainers_per_machine, entry.host, entry.port, cfg.seed)
    machine.connect([(e.host, e.port) for e in entries])
    write = None
    if metrics_out is not None and rank == 0:
        Path(metrics_out).write_text("")

        def append(stats: EpochStats):
            with open(metrics_out, "a") as fh:
                fh.write(stats.record() + "\n")
        write = append
    try:
        return _run_threads([machine], cfg, write)
    finally:
        machine.shutdown()


def launch(entries: list, train_args: list, timeout: float | None = None) -> int:
    """Spawn one ``train --rank r`` process per cluster entry; returns the worst exit code."""
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".cluster", delete=False) as fh:
        cfg_path = fh.name
    write_cluster_file(cfg_path, entries)
    procs = [subprocess.Popen([sys.executable, "-m", "distsage", "train", "--cluster", cfg_path,
                               "--rank", str(r), *train_args]) for r in range(len(entries))]
    codes = [None] * len(procs)
    deadline = None if timeout is None else time.monotonic() + timeout
    while any(c is None for c in codes):
        for i, p in enumerate(procs):
            if codes[i] is None:
                codes[i] = p.poll()
                if codes[i] not in (None, 0):
                    for q in procs:
                        if q.poll() is None:
                            q.terminate()
        if deadline is not None and time.monotonic() > deadline:
            for q in procs:
                if q.poll() is None:
                    q.kill()
            codes = [p.wait() for p in procs]
            break
        time.sleep(0.1)
    Path(cfg_path).unlink(missing_ok=True)
    return max(abs(c) for c in codes)


def parse_metrics(path) -> list:
    """Read the ``key=value`` epoch records written by a training run."""
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append({k: v for k, v in (tok.split("=", 1) for tok in line.split())})
    return out


def run_process_cluster(pds: PartitionedDataset, cfg: TrainConfig, workdir, trainers_per_machine: int = 1,
                        timeout: float = 600.0) -> list:
    """Train with one spawned OS process per machine; returns rank 0's epoch records."""
    import multiprocessing as mp

    workdir = Path(workdir)
    pds.save(workdir / "parts")
    ports = free_ports(pds.num_parts)
    entries = [ClusterEntry("127.0.0.1", ports[p], str(formats.part_dir(workdir / "parts", p)))
               for p in range(pds.num_parts)]
    metrics = workdir / "metrics.txt"
    ctx = mp.get_context("spawn")
    procs = [ctx.Process(target=run_machine_process, args=(r, entries, cfg, trainers_per_machine, metrics))
             for r in range(len(entries))]
    for p in procs:
        p.start()
    deadline = time.monotonic() + timeout
    for p in procs:
        p.join(max(0.0, deadline - time.monotonic()))
    failed = [p.exitcode for p in procs if p.exitcode != 0]
    for p in procs:
        if p.is_alive():
            p.kill()
            p.join()
    if failed:
        raise RuntimeError(f"worker processes failed with exit codes {failed}")
    return parse_metrics(metrics)
