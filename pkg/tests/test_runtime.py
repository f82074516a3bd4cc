import threading
import time

import pytest

from helpers import chain, epoch_ids, epoch_payloads, run_local
from sluice.errors import (
    DuplicateId, EmptyDataset, EpochInProgress, GroupNotContiguous, InvalidShardCount, ResourceExhausted,
    SingletonFusion, TransformFailed, UnknownPipeId, UnknownSite, UnsupportedVariant, ValidationFailed,
)
from sluice.graph import Step, SyntheticSource, attach_source, compose
from sluice.graph.constraints import reordered
from sluice.graph.model import PipeNode, TransformSpec, splice_after
from sluice.runtime.dataset import DataSet, RuntimeConfig
from sluice.runtime.variants import BASE_VARIANT, LOCAL_POOL, Backend, parse_backend


def prefetch(nid, capacity=4):
    return PipeNode(nid, TransformSpec("prefetch", (("capacity", capacity),), "prefetch"), fixed=True)


def all_ids(n):
    return sorted((0, i) for i in range(n))


# optimization interface --------------------------------------------------------

def test_register_and_place_output_prefetch():
    g = chain("decode", "flip", n=64)
    with DataSet(g) as ds:
        ds.register(prefetch(10))
        ds.update_dfg(splice_after(ds.graph, ds.graph.output_id, prefetch(10)))
        assert ds.graph.output_id == 10
        assert ds.buffer_occupancy("output") == (0, 4)
        assert sorted(epoch_ids(ds)) == all_ids(64)


def test_register_duplicate_and_orphan():
    g = chain("decode", n=16)
    with DataSet(g) as ds:
        with pytest.raises(DuplicateId):
            ds.register(prefetch(1))
        ds.register(prefetch(9))
        with pytest.raises(ValidationFailed) as err:
            ds.start_epoch()
        assert any(v.code == "Orphan" and v.node == 9 for v in err.value.violations)


def test_fuse_matches_unfused_output():
    g = chain(Step.of("truncate", max_len=32), Step.of("embed", dim=2), "flip", n=64)
    expected = run_local(g)
    with DataSet(g) as ds:
        node = ds.fuse([1, 2])
        assert node.kind == "fused" and node.member_ids == (1, 2)
        assert [n.id for n in ds.graph.nodes if n.id in (1, 2)] == []
        assert epoch_payloads(ds) == expected


def test_fuse_errors():
    g = chain("decode", "flip", "crop", n=16)
    with DataSet(g) as ds:
        with pytest.raises(SingletonFusion):
            ds.fuse([1])
        with pytest.raises(GroupNotContiguous):
            ds.fuse([1, 3])


def test_update_dfg_reorder_keeps_ids_and_rejects_bad_graphs():
    g = chain("decode", "flip", Step.of("drop_mod", modulus=3), n=96)
    with DataSet(g) as ds:
        ds.update_dfg(reordered(ds.graph, (0, 3, 2, 1)))
        assert ds.graph.topo_order() == (0, 3, 2, 1)
        assert sorted(epoch_ids(ds)) == all_ids(96)
        bad = compose([Step.of("decode").depends_on(["nowhere"])])
        with pytest.raises(ValidationFailed):
            ds.update_dfg(bad)


def test_static_changes_wait_for_epoch_end():
    g = chain("decode", "flip", n=64)
    with DataSet(g, config=RuntimeConfig(batch_size=4)) as ds:
        ds.next_batch()
        with pytest.raises(EpochInProgress):
            ds.update_dfg(ds.graph)
        ds.abort_epoch()
        ds.update_dfg(ds.graph)


def test_assign_rules():
    g = chain("decode", n=16)
    with DataSet(g, backends=[Backend(LOCAL_POOL, 2)]) as ds:
        ds.assign(1, BASE_VARIANT)
        assert ds.variant(1).is_base
        with pytest.raises(UnsupportedVariant):
            ds.assign(1, "remote_pool:1@10.0.0.9:1")
        with pytest.raises(UnsupportedVariant):
            ds.assign(0, "local_pool:1")
        with pytest.raises(UnknownPipeId):
            ds.assign(42, BASE_VARIANT)
        with pytest.raises(InvalidShardCount):
            ds.set_shards(0)


def test_set_shards_spawns_drivers_next_epoch():
    g = chain("decode", n=256, split_size=16)
    with DataSet(g, config=RuntimeConfig(batch_size=32)) as ds:
        ds.set_shards(8)
        ds.start_epoch()
        assert len(ds._run.drivers.procs) == 8
        assert sorted(epoch_ids(ds)) == all_ids(256)


# execution interface -----------------------------------------------------------

def test_shard_round_robin():
    g = chain("decode", n=64, split_size=16)
    with DataSet(g) as ds:
        h = ds.shard(2)
        assert [x.splits[0] for x in h] == [(0, 2), (1, 3)]
        assert [x.splits[0] for x in ds.shard(1)] == [(0, 1, 2, 3)]
        surplus = ds.shard(6)
        assert [x.splits[0] for x in surplus][4:] == [(), ()]
        assert sorted(s for x in surplus for s in x.splits[0]) == [0, 1, 2, 3]
        assert sorted(epoch_ids(ds)) == all_ids(64)


def test_mutate_mid_epoch_is_exactly_once(worker):
    g = chain("decode", "flip", n=256, split_size=16)
    remote = parse_backend(f"remote:{worker.endpoint}:1")
    expected = run_local(g)
    with DataSet(g, backends=[remote], config=RuntimeConfig(batch_size=8)) as ds:
        ds.assign(1, remote.variant())
        got = {}
        for i, b in enumerate(ds):
            for s in b.samples:
                assert s.sample_id not in got
                got[s.sample_id] = s.payload
            if i == 3:
                ds.mutate(1, BASE_VARIANT)
        assert got == expected
        assert ds.variant(1).is_base


def test_mutate_noop_and_unknown():
    g = chain("decode", n=16)
    with DataSet(g) as ds:
        ds.mutate(1, BASE_VARIANT)
        with pytest.raises(UnknownPipeId):
            ds.mutate(99, BASE_VARIANT)


def _tput(ds):
    best = 0.0
    for _ in range(2):
        best = max(best, ds.measure_throughput())
    return best


def test_scale_raises_throughput_on_compute_bound_op(worker):
    g = chain(Step.of("synthetic", cost_us=4000), n=128, split_size=16)
    remote = parse_backend(f"remote:{worker.endpoint}:1")
    with DataSet(g, backends=[remote], config=RuntimeConfig(batch_size=8, trace_period=None)) as ds:
        ds.assign(1, remote.variant())
        one = _tput(ds)
        ds.scale(1, 4)
        assert ds.parallelism(1) == 4
        four = _tput(ds)
    # ideal scaling is 4x; allow 20% below it
    assert four >= 0.8 * 4 * one


def test_scale_errors():
    g = chain("decode", n=16)
    with DataSet(g, backends=[Backend(LOCAL_POOL, 1, cap=2)]) as ds:
        with pytest.raises(UnsupportedVariant):
            ds.scale(1, 2)
        ds.assign(1, "local_pool:1")
        ds.scale(1, 2)
        with pytest.raises(ResourceExhausted):
            ds.scale(1, 3)


# batches and failures --------------------------------------------------------------

def test_batches_of_four_four_two():
    g = chain("decode", n=10, split_size=4)
    with DataSet(g, config=RuntimeConfig(batch_size=4)) as ds:
        sizes = [len(b) for b in ds]
        assert sizes == [4, 4, 2]
        assert ds.next_batch() is not None  # a new epoch opens on demand
        ds.abort_epoch()


def test_empty_source_is_rejected():
    with pytest.raises(EmptyDataset):
        attach_source(compose([Step.of("decode")]), SyntheticSource(0))


def test_transform_failure_names_pipe_and_sample():
    g = chain(Step.of("fail_on", marker="sample-7;"), "flip", n=32, split_size=8, tagged=True)
    with DataSet(g, config=RuntimeConfig(retry_limit=2, batch_size=4)) as ds:
        with pytest.raises(TransformFailed) as err:
            for _ in ds:
                pass
    assert err.value.pipe_id == 1 and err.value.sample_id == (0, 7)


# buffers ------------------------------------------------------------------------

def test_buffer_occupancy_fresh_saturated_unknown():
    g = chain("decode", n=512, split_size=16)
    cfg = RuntimeConfig(batch_size=1, prefetch_capacity=4)
    with DataSet(g, config=cfg) as ds:
        ds.insert_default_prefetch()
        site = ds.graph.output_id
        assert ds.buffer_occupancy(site) == (0, 4)
        ds.next_batch()  # opens the epoch, then the consumer stalls
        deadline = time.monotonic() + 10
        while ds.buffer_occupancy(site) != (4, 4) and time.monotonic() < deadline:
            time.sleep(0.02)
        assert ds.buffer_occupancy(site) == (4, 4)
        with pytest.raises(UnknownSite):
            ds.buffer_occupancy(1)
        with pytest.raises(UnknownSite):
            ds.buffer_occupancy(12345)
        ds.abort_epoch()


def test_prefetch_overlaps_producer_and_consumer():
    # producer 2 ms per sample, consumer 2 ms per sample: serial ~2x, overlapped ~1x
    g = chain(Step.of("synthetic", cost_us=2000), n=120, split_size=20)
    cfg = RuntimeConfig(batch_size=1, trace_period=None, prefetch_capacity=8)

    def run(with_prefetch):
        with DataSet(g, config=cfg) as ds:
            if with_prefetch:
                ds.insert_default_prefetch()
            t0 = time.perf_counter()
            for _ in ds:
                time.sleep(0.002)
            return time.perf_counter() - t0

    serial, overlapped = run(False), run(True)
    assert overlapped < 0.8 * serial


def test_abort_and_concurrent_mutate_do_not_deadlock(worker):
    g = chain("decode", "flip", n=256, split_size=16)
    remote = parse_backend(f"remote:{worker.endpoint}:2")
    with DataSet(g, backends=[remote], config=RuntimeConfig(batch_size=8)) as ds:
        ds.assign(1, remote.variant())
        stop = threading.Event()

        def flip():
            while not stop.is_set():
                ds.mutate(1, BASE_VARIANT if not ds.variant(1).is_base else remote.variant())
                time.sleep(0.01)

        t = threading.Thread(target=flip)
        t.start()
        try:
            ids = epoch_ids(ds)
        finally:
            stop.set()
            t.join()
        assert sorted(ids) == all_ids(256)
