"""Distributed GraphSAGE training on partitioned graphs, at desk scale."""

from .graph import Graph, LocalPartition, PartitionBook, build_csr, csr_from_arrays, relabel
from .partition import BalanceConstraints, build_partitions, partition, partition_stats, random_partition
from .datasets import Dataset, gen_synthetic
from .kvstore import KVClient, KVServer
from .sampler import DistSampler, MiniBatchGraph, sample_neighbors_local
from .sage import SageParams, init_params, sage_backward, sage_forward
from .trainer import TrainConfig, split_training_set
from .cluster import partition_dataset, run_local_cluster, run_process_cluster

__all__ = [
    "Graph",
    "LocalPartition",
    "PartitionBook",
    "build_csr",
    "csr_from_arrays",
    "relabel",
    "BalanceConstraints",
    "build_partitions",
    "partition",
    "partition_stats",
    "random_partition",
    "Dataset",
    "gen_synthetic",
    "KVClient",
    "KVServer",
    "DistSampler",
    "MiniBatchGraph",
    "sample_neighbors_local",
    "SageParams",
    "init_params",
    "sage_backward",
    "sage_forward",
    "TrainConfig",
    "split_training_set",
    "partition_dataset",
    "run_local_cluster",
    "run_process_cluster",
]

__version__ = "0.1.0"
