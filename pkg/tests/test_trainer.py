import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distsage import rpc
from distsage.cluster import partition_dataset, run_local_cluster, start_local_machines
from distsage.datasets import gen_synthetic
from distsage.rpc import MsgType, TransportError
from distsage.trainer import (AllreduceCoordinator, CollectiveGroup, EpochStats, TrainConfig, assign_chunks,
                              split_training_set, tree_mean)

from conftest import contiguous_book


# --- workload split -------------------------------------------------------------

def test_split_matches_ownership_when_aligned():
    book = contiguous_book(20, 2, seed=0)
    lo, hi = book.node_range(1)
    mask = np.zeros(20, bool)
    mask[[0, 1, lo, lo + 1]] = True
    if lo < 2:
        pytest.skip("degenerate book")
    shards = split_training_set(book, mask, 1)
    assert shards[0].tolist() == [0, 1] and shards[1].tolist() == [lo, lo + 1]


def test_overlap_rule_contested_id():
    from distsage.graph import relabel
    from distsage.graph import csr_from_arrays

    g = csr_from_arrays(np.zeros(0, int), np.zeros(0, int), 10)
    _, book = relabel(g, np.array([0] * 5 + [1] * 5), np.zeros(0, int), 2)
    owner = assign_chunks([np.arange(0, 6), np.arange(6, 10)], book)
    assert owner.tolist() == [0, 1]
    # ties go to the lower machine
    assert assign_chunks([np.array([4, 5]), np.array([3])], book).tolist() == [0, 1]


def test_one_machine_two_trainers():
    book = contiguous_book(5, 1)
    shards = split_training_set(book, np.ones(5, bool), 2)
    assert sorted(len(s) for s in shards) == [2, 3]


def test_too_many_trainers():
    with pytest.raises(ValueError):
        split_training_set(contiguous_book(10, 2), np.array([1, 0, 1] + [0] * 7, bool), 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(20, 200), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_split_properties(n, m, t, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random(n) < 0.6
    if mask.sum() < m * t:
        return
    book = contiguous_book(n, m, seed)
    shards = split_training_set(book, mask, t)
    assert len(shards) == m * t
    every = np.concatenate(shards)
    assert np.array_equal(np.sort(every), np.flatnonzero(mask))
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1


# --- collectives ---------------------------------------------------------------------

def test_tree_mean_examples():
    assert tree_mean([np.array([1, 3]), np.array([3, 1])]).tolist() == [2, 2]
    v = np.array([0.1, 0.7], np.float32)
    assert np.array_equal(tree_mean([v]), v)


def run_group(world, vectors, via_rpc=False):
    coord = AllreduceCoordinator(world)
    out = [None] * world
    server = rpc.Server({MsgType.ALLREDUCE_SEG: coord.handle}) if via_rpc else None
    clients = []

    def member(r):
        if via_rpc and r > 0:
            c = rpc.Client(*server.address)
            clients.append(c)
            grp = CollectiveGroup(r, world, client=c)
        else:
            grp = CollectiveGroup(r, world, coordinator=coord)
        out[r] = grp.allreduce(vectors[r])

    threads = [threading.Thread(target=member, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for c in clients:
        c.close()
    if server:
        server.close()
    return out


@pytest.mark.parametrize("via_rpc", [False, True])
def test_allreduce_matches_central_mean(via_rpc):
    rng = np.random.default_rng(0)
    vecs = [rng.normal(size=257).astype(np.float32) for _ in range(4)]
    out = run_group(4, vecs, via_rpc)
    oracle = ((vecs[0] + vecs[1]) + (vecs[2] + vecs[3])) / np.float32(4)
    for o in out:
        assert o.tobytes() == oracle.tobytes()
    assert np.allclose(out[0], np.mean(vecs, axis=0), atol=1e-6)


def test_allreduce_single_member_identity():
    v = np.array([1.5, -2.0], np.float32)
    assert np.array_equal(CollectiveGroup(0, 1, coordinator=AllreduceCoordinator(1)).allreduce(v), v)


def test_allreduce_length_mismatch():
    coord = AllreduceCoordinator(2)
    coord.contribute(0, 0, np.zeros(3, np.float32))
    with pytest.raises(ValueError):
        coord.contribute(0, 1, np.zeros(2, np.float32)).result(1)


def test_disconnect_aborts_collective():
    coord = AllreduceCoordinator(3)
    server = rpc.Server({MsgType.ALLREDUCE_SEG: coord.handle})
    server.disconnect_hooks.append(coord.on_disconnect)
    result = {}
    c1 = rpc.Client(*server.address)

    def waiter():
        try:
            CollectiveGroup(0, 3, coordinator=coord, timeout=10).allreduce(np.ones(2))
        except TransportError as exc:
            result["err"] = exc

    t = threading.Thread(target=waiter)
    t.start()
    h = c1.call_async(MsgType.ALLREDUCE_SEG, rpc.pack(0, 1, np.ones(2, np.float32)))
    c2 = rpc.Client(*server.address)
    import time
    time.sleep(0.2)
    c2.close()  # rank 2 disappears before contributing
    t.join(10)
    assert "err" in result
    with pytest.raises((rpc.RemoteError, TransportError)):
        h.wait(10)
    c1.close()
    server.close()


# --- training loop ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_cluster():
    ds = gen_synthetic(num_nodes=400, seed=0)
    pds = partition_dataset(ds, 4, seed=0)
    machines = start_local_machines(pds, trainers_per_machine=1)
    yield ds, pds, machines
    for m in machines:
        m.close()


def contexts(machines, cfg):
    return [m.trainer_context(0, cfg) for m in machines]


def test_epoch_covers_training_set_once(small_cluster):
    ds, pds, machines = small_cluster
    cfg = TrainConfig(fanouts=(3, 3), hidden=8, batch_size=17)
    ctxs = contexts(machines, cfg)
    for epoch in range(2):
        batches = [ctx.epoch_batches(epoch) for ctx in ctxs]
        assert len({len(b) for b in batches}) == 1
        seen = np.concatenate([np.concatenate(b) for b in batches])
        want = np.flatnonzero(pds.node_data["train_mask"])
        assert np.array_equal(np.sort(seen), want)
    assert not np.array_equal(ctxs[0].epoch_batches(0)[0], ctxs[0].epoch_batches(1)[0])


def test_first_gradient_independent_of_trainer_count(small_cluster):
    ds, pds, machines = small_cluster
    cfg = TrainConfig(fanouts=(4, 3), hidden=8, batch_size=40)
    ctxs = contexts(machines, cfg)
    seeds = np.flatnonzero(pds.node_data["train_mask"])[:80]
    rng_seed = 1234
    # one trainer computing the whole batch
    full = ctxs[0].sampler.sample_minibatch(seeds, cfg.fanouts, rng_seed)
    g1, n1, _, _ = ctxs[0].compute_gradients(full)
    mean1 = g1 / n1
    # four trainers each taking a quarter, then the global per-seed mean
    total, count = 0, 0
    for ctx, part in zip(ctxs, np.array_split(seeds, 4)):
        mb = ctx.sampler.sample_minibatch(part, cfg.fanouts, rng_seed)
        g, n, _, _ = ctx.compute_gradients(mb)
        total = total + g.astype(np.float64)
        count += n
    mean4 = total / count
    assert np.linalg.norm(mean4 - mean1) / np.linalg.norm(mean1) < 1e-5


def test_untrained_accuracy_is_chance_and_eval_is_pure(small_cluster):
    ds, pds, machines = small_cluster
    cfg = TrainConfig(fanouts=(4, 3), hidden=16, batch_size=50, seed=3)
    ctxs = contexts(machines, cfg)
    before = ctxs[0].params.checksum()
    accs = [None] * 4

    def run(i):
        accs[i] = ctxs[i].evaluate("test")

    threads = [threading.Thread(target=run, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(accs)) == 1
    assert abs(accs[0] - 0.25) <= 0.15
    assert ctxs[0].params.checksum() == before


def test_local_cluster_replicas_and_timers():
    ds = gen_synthetic(num_nodes=300, seed=1)
    pds = partition_dataset(ds, 2, seed=1)
    cfg = TrainConfig(fanouts=(4, 3), hidden=8, batch_size=30, epochs=2, lr=0.05, debug_checksums=True)
    res = run_local_cluster(pds, cfg, trainers_per_machine=2)
    assert len(res) == 4
    for r in res[1:]:
        assert r.history[-1].checksums == res[0].history[-1].checksums
        assert r.params.checksum() == res[0].params.checksum()
    for h in res[0].history:
        phases = h.sample + h.data_copy + h.forward_backward + h.sync
        assert min(h.sample, h.data_copy, h.forward_backward, h.sync) >= 0
        assert phases <= h.wall * 1.05
        assert h.iterations == 2 and h.seeds_seen > 0  # 45 seeds per trainer, batch 30
        assert 0 <= h.val_acc <= 1


def test_epoch_stats_record():
    s = EpochStats(epoch=2, wall=1.0, losses=[0.5], local_inputs=3, total_inputs=4)
    rec = dict(tok.split("=") for tok in s.record().split())
    assert rec["epoch"] == "2" and rec["loss"] == "0.500000" and rec["local_fraction"] == "0.750000"
