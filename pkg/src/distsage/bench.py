"""Ablation and scaling reports as comma-separated tables."""

from __future__ import annotations

import dataclasses
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import partition_dataset, run_local_cluster, run_process_cluster
from .datasets import Dataset
from .trainer import TrainConfig

# wall-clock columns; everything else is reproducible from (dataset, config)
TIMING_COLUMNS = ("epoch_time", "data_copy", "sample", "sync", "throughput")


@dataclass
class Report:
    title: str
    config: dict
    columns: list
    rows: list = field(default_factory=list)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = [f"# {self.title}"] + [f"# {k}={self.config[k]}" for k in sorted(self.config)]
        return "\n".join(head) + "\n" + self.to_csv()


def _records(pds, cfg: TrainConfig, backend: str, trainers_per_machine: int) -> list:
    if backend == "process":
        with tempfile.TemporaryDirectory() as d:
            return run_process_cluster(pds, cfg, Path(d), trainers_per_machine)
    if backend == "thread":
        res = run_local_cluster(pds, cfg, trainers_per_machine)
        return [dict(tok.split("=", 1) for tok in h.record().split()) for h in res[0].history]
    raise ValueError(f"unknown backend {backend!r}")


def _mean(records, key: str, skip: int) -> float:
    vals = [float(r[key]) for r in records[skip:]] or [float(r[key]) for r in records]
    return float(np.mean(vals))


def config_echo(cfg: TrainConfig, **extra) -> dict:
    out = {k: (",".join(map(str, v)) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
    out.update(extra)
    return out


def ablation_report(ds: Dataset, k: int, seeds, cfg: TrainConfig, backend: str = "process",
                    trainers_per_machine: int = 1, warmup: int = 1, eps: float = 0.05) -> Report:
    """Random vs min-cut partitioning under an identical training config.

    Timing columns are per-epoch means after dropping ``warmup`` epochs.
    """
    rep = Report("partition ablation",
                 config_echo(cfg, machines=k, trainers_per_machine=trainers_per_machine, backend=backend,
                             warmup=warmup, eps=eps, num_nodes=ds.num_nodes, num_edges=len(ds.edges),
                             feat_dim=ds.features.shape[1], seeds=",".join(map(str, seeds))),
                 ["method", "seed", "edge_cut", "balanced", "local_fraction", "epoch_time", "data_copy",
                  "sample", "sync"])
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=int(seed))
        for method in ("random", "metis"):
            pds = partition_dataset(ds, k, method, seed=int(seed), eps=eps)
            recs = _records(pds, run_cfg, backend, trainers_per_machine)
            rep.rows.append([method, int(seed), pds.report.edge_cut, str(pds.report.balanced).lower(),
                             _mean(recs, "local_fraction", 0), _mean(recs, "wall", warmup),
                             _mean(recs, "data_copy", warmup), _mean(recs, "sample", warmup),
                             _mean(recs, "sync", warmup)])
    return rep


def scaling_report(ds: Dataset, machine_counts, cfg: TrainConfig, backend: str = "process",
                   trainers_per_machine: int = 1, warmup: int = 1, method: str = "metis") -> Report:
    """Epoch time and final accuracy per machine count, per-trainer batch held fixed."""
    rep = Report("scaling",
                 config_echo(cfg, trainers_per_machine=trainers_per_machine, backend=backend, warmup=warmup,
                             method=method, num_nodes=ds.num_nodes, machine_counts=",".join(map(str, machine_counts))),
                 ["workers", "epoch_time", "throughput", "final_val_acc", "final_test_acc"])
    n_train = int(ds.train_mask.sum())
    for m in machine_counts:
        pds = partition_dataset(ds, int(m), method, seed=cfg.seed)
        recs = _records(pds, cfg, backend, trainers_per_machine)
        wall = _mean(recs, "wall", warmup)
        rep.rows.append([int(m) * trainers_per_machine, wall, n_train / wall if wall > 0 else float("nan"),
                         float(recs[-1]["val_acc"]), float(recs[-1]["test_acc"])])
    return rep
