import numpy as np
import pytest

from distsage.graph import csr_from_arrays


def random_graph(n, m, seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n, m)
    dst = rng.integers(0, n, m)
    return csr_from_arrays(src, dst, n)


def two_cliques(size=10):
    """Two cliques joined by one bridge, each undirected edge listed once."""
    edges = []
    for base in (0, size):
        for i in range(size):
            for j in range(i + 1, size):
                edges.append((base + i, base + j))
    edges.append((size - 1, size))
    e = np.array(edges)
    return csr_from_arrays(e[:, 0], e[:, 1], 2 * size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class KVDeployment:
    """``k`` KV servers behind real sockets plus one client per machine."""

    def __init__(self, book):
        from distsage import rpc
        from distsage.kvstore import KVClient, KVServer

        self.servers = [KVServer(p, book) for p in range(book.num_parts)]
        self.rpc_servers = [rpc.Server(s.handlers()) for s in self.servers]
        self.links = []
        self.clients = []
        for p in range(book.num_parts):
            remotes = {q: rpc.Client(*self.rpc_servers[q].address) for q in range(book.num_parts) if q != p}
            self.links.extend(remotes.values())
            self.clients.append(KVClient(p, book, self.servers[p], remotes))

    def load(self, name, data, book):
        for p, s in enumerate(self.servers):
            lo, hi = book.node_range(p)
            s.load(name, "node", data[lo:hi])

    def close(self):
        for c in self.links:
            c.close()
        for s in self.rpc_servers:
            s.close()


def contiguous_book(n, k, seed=0):
    """Book with ``k`` non-empty ranges over ``n`` nodes (identity relabeling order)."""
    from distsage.graph import relabel

    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False)) if k > 1 else np.array([], int)
    assign = np.searchsorted(cuts, np.arange(n), side="right")
    g = csr_from_arrays(np.zeros(0, int), np.zeros(0, int), n)
    _, book = relabel(g, assign, np.zeros(0, int), k)
    return book


class SamplerDeployment:
    """Partition ``g`` by ``assign`` and serve every partition's sampler over sockets."""

    def __init__(self, g, assign, k):
        from distsage import rpc
        from distsage.partition import build_partitions
        from distsage.sampler import DistSampler, SamplerService

        self.parts, self.book, self.relabeled = build_partitions(g, assign, k)
        self.services = [SamplerService(p, self.book) for p in self.parts]
        self.rpc_servers = [rpc.Server(s.handlers()) for s in self.services]
        self.links = []
        self.samplers = []
        for p in range(k):
            remotes = {q: rpc.Client(*self.rpc_servers[q].address) for q in range(k) if q != p}
            self.links.extend(remotes.values())
            self.samplers.append(DistSampler(p, self.book, self.services[p], remotes))

    def to_new(self, orig_ids):
        return self.book.node_perm[np.asarray(orig_ids)]

    def to_orig(self, new_ids):
        return self.book.node_perm_inv[np.asarray(new_ids)]

    def close(self):
        for c in self.links:
            c.close()
        for s in self.rpc_servers:
            s.close()


ACCEPTANCE = []


def accept(number, name, ok, detail, elapsed=None, budget=None):
    """Record one acceptance line; the criterion fails if over its time budget."""
    within = budget is None or elapsed is None or elapsed < budget
    passed = bool(ok) and within
    timing = "" if elapsed is None else f" [{elapsed:.1f}s / {budget:.0f}s budget]"
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'} {name}: {detail}{timing}"
    ACCEPTANCE.append((number, line))
    print(line)
    assert ok, line
    assert within, f"over time budget: {line}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
