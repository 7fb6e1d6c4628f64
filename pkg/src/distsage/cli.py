"""Command line: ``python -m distsage <command>``.

Commands: gen, partition, train, launch, ablate, scale.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .bench import ablation_report, scaling_report
from .cluster import (ClusterEntry, PartitionedDataset, free_ports, launch, read_cluster_file, run_local_cluster,
                      run_machine_process)
from .datasets import Dataset, gen_synthetic
from .graph import csr_from_arrays, load_edgelist
from .partition import (BalanceConstraints, build_partitions, partition, partition_stats, random_partition)
from .trainer import TrainConfig


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x)


def _train_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training")
    g.add_argument("--fanouts", type=_int_list, default=(15, 10, 5))
    g.add_argument("--hidden", type=int, default=256)
    g.add_argument("--batch-size", type=int, default=2000, help="seeds per trainer per iteration")
    g.add_argument("--epochs", type=int, default=1)
    g.add_argument("--lr", type=float, default=0.003)
    g.add_argument("--momentum", type=float, default=0.0)
    g.add_argument("--mode", choices=("feat", "embed"), default="feat")
    g.add_argument("--emb-dim", type=int, default=16)
    g.add_argument("--emb-lr", type=float, default=0.1)
    g.add_argument("--emb-optimizer", choices=("adagrad", "sgd"), default="adagrad")
    g.add_argument("--train-seed", type=int, default=0)
    g.add_argument("--eval-every", type=int, default=1, help="0 disables evaluation")
    g.add_argument("--max-iters", type=int, default=None)
    g.add_argument("--trainers-per-machine", type=int, default=1)
    return p


def _train_config(args) -> TrainConfig:
    return TrainConfig(fanouts=args.fanouts, hidden=args.hidden, batch_size=args.batch_size, epochs=args.epochs,
                       lr=args.lr, momentum=args.momentum, mode=args.mode, emb_dim=args.emb_dim,
                       emb_lr=args.emb_lr, emb_optimizer=args.emb_optimizer, seed=args.train_seed,
                       eval_every=args.eval_every, max_iters=args.max_iters)


def _train_argv(args) -> list:
    """Re-serialise training flags for child processes."""
    out = ["--fanouts", ",".join(map(str, args.fanouts)), "--hidden", str(args.hidden),
           "--batch-size", str(args.batch_size), "--epochs", str(args.epochs), "--lr", repr(args.lr),
           "--momentum", repr(args.momentum), "--mode", args.mode, "--emb-dim", str(args.emb_dim),
           "--emb-lr", repr(args.emb_lr), "--emb-optimizer", args.emb_optimizer,
           "--train-seed", str(args.train_seed), "--eval-every", str(args.eval_every),
           "--trainers-per-machine", str(args.trainers_per_machine)]
    if args.max_iters is not None:
        out += ["--max-iters", str(args.max_iters)]
    if args.metrics_out:
        out += ["--metrics-out", str(args.metrics_out)]
    return out


def _dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=("sbm", "powerlaw"), default="sbm")
    p.add_argument("--nodes", type=int, default=1000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--feat-dim", type=int, default=None, help="default: number of classes; 0 = featureless")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--attach", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)


def _gen_dataset(args) -> Dataset:
    return gen_synthetic(args.kind, args.nodes, args.classes, args.p_in, args.p_out, args.feat_dim, args.noise,
                         args.attach, args.seed)


def cmd_gen(args) -> int:
    ds = _gen_dataset(args)
    ds.save(args.out)
    print(f"wrote {ds.num_nodes} nodes, {len(ds.edges)} edges to {args.out}")
    return 0


def _read_labels(path: Path, num_nodes: int):
    """Balance labels and node data from an ``.mdg`` file or a whitespace text table."""
    if path.suffix == ".mdg":
        nd = formats.read_arrays(path)
        cols = [nd[k] for k in ("train_mask", "val_mask", "test_mask") if k in nd]
        if not cols:
            cols = [nd[k] for k in sorted(nd) if nd[k].ndim == 1 and k != "label"]
        labels = np.column_stack([np.ones(num_nodes)] + [np.asarray(c, dtype=np.float64) for c in cols])
        return labels, nd
    table = np.loadtxt(path, ndmin=2)
    if table.shape[0] != num_nodes:
        raise SystemExit(f"{path}: {table.shape[0]} label rows for {num_nodes} nodes")
    return np.column_stack([np.ones(num_nodes), table]), {}


def cmd_partition(args) -> int:
    edges, n = load_edgelist(args.graph)
    if args.num_nodes is not None:
        n = args.num_nodes
    g = csr_from_arrays(edges[:, 0], edges[:, 1], n)
    node_data = {}
    if args.labels:
        labels, node_data = _read_labels(Path(args.labels), n)
    else:
        labels = np.ones((n, 1))
    if args.balance_edges:
        # owned edges follow the destination, so in-degree is the per-node edge load
        labels = np.column_stack([labels, g.in_degrees()])
    cons = BalanceConstraints(labels, args.parts, args.eps)
    if args.method == "metis":
        pa = partition(g, cons, seed=args.seed)
    else:
        pa = random_partition(g, args.parts, args.seed, cons)
    parts, book, _ = build_partitions(g, pa.assign, args.parts)
    inv = book.node_perm_inv
    feats = formats.read_matrix(args.features)[inv] if args.features else None
    if feats is not None and feats.shape[1] == 0:
        feats = None
    node_data = {k: np.asarray(v)[inv] for k, v in node_data.items()}
    report = partition_stats(pa.assign, g, cons)
    PartitionedDataset(parts, book, node_data, feats, report).save(args.out)
    print(report.to_text(), end="")
    if not report.balanced:
        print("warning: balance constraints violated", file=sys.stderr)
    return 0


def _print_epoch(stats) -> None:
    print(stats.record(), flush=True)


def _metrics_writer(path):
    if not path:
        return _print_epoch
    Path(path).write_text("")

    def write(stats):
        _print_epoch(stats)
        with open(path, "a") as fh:
            fh.write(stats.record() + "\n")
    return write


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.cluster is not None:
        if args.rank is None:
            raise SystemExit("--cluster requires --rank")
        entries = read_cluster_file(args.cluster)
        run_machine_process(args.rank, entries, cfg, args.trainers_per_machine, args.metrics_out)
        return 0
    if args.part_dir is None:
        raise SystemExit("train needs --part-dir (or --cluster and --rank)")
    pds = PartitionedDataset.load(args.part_dir)
    if args.machines is not None and args.machines != pds.num_parts:
        raise SystemExit(f"--machines {args.machines} but {args.part_dir} has {pds.num_parts} partitions")
    run_local_cluster(pds, cfg, args.trainers_per_machine, _metrics_writer(args.metrics_out))
    return 0


def cmd_launch(args) -> int:
    if args.cluster is not None:
        entries = read_cluster_file(args.cluster)
    else:
        if args.part_dir is None or args.machines is None:
            raise SystemExit("launch needs --cluster, or --part-dir with --machines")
        ports = free_ports(args.machines)
        entries = [ClusterEntry("127.0.0.1", ports[r], str(formats.part_dir(args.part_dir, r)))
                   for r in range(args.machines)]
    code = launch(entries, _train_argv(args), args.timeout)
    if code == 0 and args.metrics_out:
        print(Path(args.metrics_out).read_text(), end="")
    return code


def _bench_dataset(args) -> Dataset:
    return Dataset.load(args.dataset) if args.dataset else _gen_dataset(args)


def _emit(report, out) -> None:
    text = report.to_text()
    if out:
        Path(out).write_text(text)
    print(text, end="")


def cmd_ablate(args) -> int:
    rep = ablation_report(_bench_dataset(args), args.parts, _int_list(args.seeds), _train_config(args),
                          args.backend, args.trainers_per_machine, args.warmup, args.eps)
    _emit(rep, args.out)
    return 0


def cmd_scale(args) -> int:
    rep = scaling_report(_bench_dataset(args), _int_list(args.machines), _train_config(args), args.backend,
                         args.trainers_per_machine, args.warmup)
    _emit(rep, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distsage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    train_parent = _train_parent()

    p = sub.add_parser("gen", help="generate a synthetic labelled graph")
    _dataset_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("partition", help="partition an edge list into per-machine directories")
    p.add_argument("--graph", required=True, help="edge list, one 'src dst' per line")
    p.add_argument("--parts", type=int, required=True)
    p.add_argument("--labels", help="balance labels: node_data .mdg file or whitespace text table")
    p.add_argument("--features", help="MDT1 feature matrix")
    p.add_argument("--num-nodes", type=int, default=None)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--balance-edges", action="store_true", help="also balance owned edge counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("metis", "random"), default="metis")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_partition)

    for name, fn, text in (("train", cmd_train, "train in-process, or one machine of a cluster"),
                           ("launch", cmd_launch, "spawn one worker process per machine")):
        p = sub.add_parser(name, parents=[train_parent], help=text)
        p.add_argument("--part-dir")
        p.add_argument("--machines", type=int)
        p.add_argument("--cluster", help="cluster file: 'host port part_path' per rank")
        p.add_argument("--metrics-out")
        if name == "train":
            p.add_argument("--rank", type=int)
        else:
            p.add_argument("--timeout", type=float, default=None)
        p.set_defaults(fn=fn)

    for name, fn in (("ablate", cmd_ablate), ("scale", cmd_scale)):
        p = sub.add_parser(name, parents=[train_parent],
                           help="random vs min-cut table" if name == "ablate" else "workers vs epoch time table")
        _dataset_args(p)
        p.add_argument("--dataset", help="dataset directory from 'gen' (otherwise generated)")
        p.add_argument("--backend", choices=("process", "thread"), default="process")
        p.add_argument("--warmup", type=int, default=1)
        p.add_argument("--out")
        if name == "ablate":
            p.add_argument("--parts", type=int, default=4)
            p.add_argument("--seeds", default="0,1,2")
            p.add_argument("--eps", type=float, default=0.05)
        else:
            p.add_argument("--machines", default="1,2,4")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)
