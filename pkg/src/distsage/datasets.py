"""Synthetic node-classification datasets (stand-ins for OGB graphs)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .graph import ID_DTYPE, build_csr, load_edgelist, save_edgelist, symmetrize


@dataclass
class Dataset:
    num_nodes: int
    edges: np.ndarray          # [E, 2] directed (src, dst)
    features: np.ndarray       # [n, d] float32, may have d == 0
    labels: np.ndarray         # [n] int64
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def graph(self):
        return build_csr(self.edges, self.num_nodes)

    def node_data(self) -> dict:
        return {
            "label": self.labels.astype(np.int64),
            "train_mask": self.train_mask.astype(np.uint8),
            "val_mask": self.val_mask.astype(np.uint8),
            "test_mask": self.test_mask.astype(np.uint8),
        }

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        save_edgelist(root / "edges.txt", self.edges)
        formats.write_matrix(root / "feat.mdt", self.features)
        formats.write_arrays(root / "node_data.mdg", self.node_data())

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        edges, _ = load_edgelist(root / "edges.txt")
        nd = formats.read_arrays(root / "node_data.mdg")
        feats = formats.read_matrix(root / "feat.mdt")
        n = nd["label"].shape[0]
        return cls(n, edges, feats, nd["label"], nd["train_mask"].astype(bool),
                   nd["val_mask"].astype(bool), nd["test_mask"].astype(bool))


def stratified_masks(labels: np.ndarray, rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)):
    n = labels.size
    masks = [np.zeros(n, dtype=bool) for _ in fractions]
    bounds = np.cumsum(fractions)
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        cuts = np.round(bounds * members.size).astype(int)
        cuts[-1] = members.size
        start = 0
        for mask, stop in zip(masks, cuts):
            mask[members[start:stop]] = True
            start = stop
    return masks


def sbm_edges(communities: np.ndarray, p_in: float, p_out: float, rng: np.random.Generator) -> np.ndarray:
    """Undirected planted-partition edges ``u < v``."""
    n = communities.size
    iu, ju = np.triu_indices(n, k=1)
    same = communities[iu] == communities[ju]
    prob = np.where(same, p_in, p_out)
    hit = rng.random(iu.size) < prob
    return np.stack([iu[hit], ju[hit]], axis=1).astype(ID_DTYPE)


def preferential_attachment_edges(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    targets = list(range(m))
    repeated: list[int] = []
    edges = []
    for v in range(m, n):
        chosen = set()
        while len(chosen) < m:
            pool = repeated if repeated else targets
            chosen.add(int(pool[rng.integers(len(pool))]))
        for u in chosen:
            edges.append((u, v))
        repeated.extend(chosen)
        repeated.extend([v] * m)
    return np.array(edges, dtype=ID_DTYPE).reshape(-1, 2)


def gen_synthetic(kind: str = "sbm", num_nodes: int = 1000, num_classes: int = 4, p_in: float = 0.1,
                  p_out: float = 0.01, feat_dim: int | None = None, noise: float = 1.0,
                  attach: int = 5, seed: int = 0) -> Dataset:
    """Generate a labelled graph with 60/20/20 stratified splits.

    ``sbm`` labels each node by its planted community; ``powerlaw`` grows a
    preferential-attachment graph with uniformly random labels.  Features
    are the one-hot label padded to ``feat_dim`` columns plus Gaussian
    noise; ``feat_dim=0`` yields a featureless dataset.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % num_classes).astype(np.int64)
    if kind == "sbm":
        und = sbm_edges(labels, p_in, p_out, rng)
    elif kind == "powerlaw":
        und = preferential_attachment_edges(num_nodes, attach, rng)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    edges = symmetrize(und)
    d = num_classes if feat_dim is None else feat_dim
    if d and d < num_classes:
        raise ValueError("feat_dim must be 0 or at least num_classes")
    feats = np.zeros((num_nodes, d), dtype=np.float32)
    if d:
        feats[np.arange(num_nodes), labels] = 1.0
        feats += rng.normal(0.0, noise, size=feats.shape).astype(np.float32)
    train, val, test = stratified_masks(labels, rng)
    return Dataset(num_nodes, edges, feats, labels, train, val, test)
