import json
import time
from types import SimpleNamespace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain
from sluice.autotune import (
    BOTTLENECKED, OVER, STEADY, Tuner, TunerConfig, TunerState, detect, scale_down_step, scale_up_step,
    total_workers,
)
from sluice.errors import NoOp, ResourceExhausted, UnknownPipeId
from sluice.graph import Step
from sluice.runtime.dataset import DataSet, RuntimeConfig
from sluice.runtime.variants import BASE_VARIANT, LOCAL_POOL, Backend

POOL = Backend(LOCAL_POOL, 1, cap=4)


class FakeDataSet:
    """Execution interface double: per-pipe buffers and a shared executor cap."""

    def __init__(self, assignment, lat_base=None, buffers=None, cap=4, output=(0, 8)):
        self.assignment = dict(assignment)
        self.graph = SimpleNamespace(by_id={p: None for p in self.assignment})
        lat_base = lat_base or {}
        self.store = SimpleNamespace(pipe=lambda p: SimpleNamespace(lat_base=lat_base.get(p)))
        self.buffers = dict(buffers or {})
        self.output = output
        self.cap = cap
        self.calls = []

    def variant(self, p):
        if p not in self.assignment:
            raise UnknownPipeId(p)
        return self.assignment[p]

    def prefetch_site_for(self, p):
        return p if p in self.buffers else None

    def buffer_occupancy(self, site):
        return self.output if site == "output" else self.buffers[site]

    def _held_without(self, p):
        return sum(v.parallelism for q, v in self.assignment.items() if q != p and not v.is_base)

    def scale(self, p, n):
        if self._held_without(p) + n > self.cap:
            raise ResourceExhausted(f"cap {self.cap}")
        self.calls.append(("scale", p, n))
        self.assignment[p] = self.assignment[p].with_parallelism(n)

    def mutate(self, p, v):
        if not v.is_base and self._held_without(p) + v.parallelism > self.cap:
            raise ResourceExhausted(f"cap {self.cap}")
        self.calls.append(("mutate", p, v.key()))
        self.assignment[p] = v


def state_for(ds, seed=0, planned=None):
    st_ = TunerState.from_dataset(ds, seed)
    if planned:
        st_.p_star = frozenset(planned)
        st_.variants.update(planned)
    return st_


CFG = TunerConfig()


@pytest.mark.parametrize("snap,expected", [((32, 32), OVER), ((2, 32), BOTTLENECKED), ((16, 32), STEADY),
                                           ((0, 0), STEADY), ((8, 32), STEADY), ((24, 32), STEADY)])
def test_detect(snap, expected):
    assert detect(snap, CFG) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.data())
def test_detect_partitions_occupancy(cap, data):
    n = data.draw(st.integers(0, cap))
    mode = detect((n, cap), CFG)
    assert (mode == OVER) == (n / cap > 0.75)
    assert (mode == BOTTLENECKED) == (n / cap < 0.25)


def test_config_validation():
    with pytest.raises(ValueError):
        TunerConfig(low_threshold=0.8, high_threshold=0.5)
    with pytest.raises(ValueError):
        TunerConfig(interval=0)
    with pytest.raises(ValueError):
        TunerConfig(step=0)


# scale down ----------------------------------------------------------------------

def test_scale_down_decrements_parallelism():
    ds = FakeDataSet({1: POOL.variant(3)})
    act = scale_down_step(ds, state_for(ds), CFG)
    assert (act.kind, act.pipe, act.before, act.after) == ("scale", 1, "local_pool:3", "local_pool:2")
    assert ds.variant(1).parallelism == 2


def test_scale_down_at_one_returns_to_base():
    ds = FakeDataSet({1: POOL.variant(1)})
    act = scale_down_step(ds, state_for(ds), CFG)
    assert act.kind == "mutate" and act.after == "base"
    assert ds.variant(1).is_base


def test_scale_down_without_offloads_is_noop():
    ds = FakeDataSet({1: BASE_VARIANT, 2: BASE_VARIANT})
    with pytest.raises(NoOp):
        scale_down_step(ds, state_for(ds), CFG)
    assert ds.calls == []


def test_scale_down_choice_is_seeded():
    picks = []
    for _ in range(2):
        ds = FakeDataSet({p: POOL.variant(1) for p in range(1, 6)}, cap=10)
        st_ = state_for(ds, seed=5)
        picks.append([scale_down_step(ds, st_, CFG).pipe for _ in range(5)])
    assert picks[0] == picks[1] and sorted(picks[0]) == [1, 2, 3, 4, 5]


# scale up ------------------------------------------------------------------------

def test_scale_up_picks_most_starved_buffer():
    ds = FakeDataSet({1: POOL.variant(1), 2: POOL.variant(1)}, buffers={1: (1, 10), 2: (6, 10)})
    act = scale_up_step(ds, state_for(ds), CFG)
    assert (act.kind, act.pipe, act.after) == ("scale", 1, "local_pool:2")


def test_scale_up_restores_slowest_planned_offload():
    planned = {1: POOL.variant(2), 2: POOL.variant(2)}
    ds = FakeDataSet({1: BASE_VARIANT, 2: BASE_VARIANT}, lat_base={1: 0.005, 2: 0.002})
    act = scale_up_step(ds, state_for(ds, planned=planned), CFG)
    assert (act.kind, act.pipe, act.after) == ("mutate", 1, "local_pool:1")


def test_scale_up_frees_capacity_from_same_backend():
    ds = FakeDataSet({1: POOL.variant(2), 2: POOL.variant(2)}, buffers={1: (0, 10), 2: (5, 10)}, cap=4)
    before = total_workers(ds)
    act = scale_up_step(ds, state_for(ds), CFG)
    assert act.pipe == 1 and act.after == "local_pool:3"
    assert act.extra == [{"kind": "scale", "pipe": 2, "before": "local_pool:2", "after": "local_pool:1"}]
    assert total_workers(ds) == before == 4


def test_scale_up_at_capacity_alone_is_noop():
    ds = FakeDataSet({1: POOL.variant(4)}, cap=4)
    with pytest.raises(NoOp):
        scale_up_step(ds, state_for(ds), CFG)


def test_scale_up_without_plan_is_noop():
    ds = FakeDataSet({1: BASE_VARIANT})
    with pytest.raises(NoOp):
        scale_up_step(ds, state_for(ds), CFG)


def test_cooldown_blocks_immediate_reversal():
    ds = FakeDataSet({1: POOL.variant(2)})
    st_ = state_for(ds)
    scale_down_step(ds, st_, CFG)
    st_.interval += 1
    with pytest.raises(NoOp):
        scale_up_step(ds, st_, CFG)
    st_.interval += 1
    assert scale_up_step(ds, st_, CFG).after == "local_pool:2"


# control loop --------------------------------------------------------------------

def test_tuner_steps_log_jsonl(tmp_path):
    log = tmp_path / "tune.jsonl"
    ds = FakeDataSet({1: POOL.variant(2)}, output=(8, 8))
    tuner = Tuner(ds, CFG, log)
    acts = [tuner.step() for _ in range(3)]
    tuner.stop()
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["interval"] for r in rows] == [0, 1, 2]
    assert [a.kind for a in acts] == ["scale", "mutate", "noop"]
    assert rows[0]["state"] == OVER and rows[0]["occupancy"] == [8, 8] and rows[0]["held"] == 1
    assert rows[1]["held"] == 0


def test_tuner_records_errors_and_keeps_going():
    ds = FakeDataSet({1: POOL.variant(1)}, output=(0, 8))
    planned = {1: POOL.variant(1)}

    def broken(p, v):
        raise UnknownPipeId(p)

    ds.scale = broken
    tuner = Tuner(ds, CFG, state=state_for(ds, planned=planned))
    first = tuner.step()
    ds.output = (4, 8)
    second = tuner.step()
    assert first.kind == "error" and "UnknownPipeId" in first.reason
    assert second.kind == "noop" and second.state == STEADY


def test_tuner_on_real_dataset_scales_down_when_consumer_stalls():
    g = chain(Step.of("synthetic", cost_us=100), n=4000, split_size=16)
    backend = Backend(LOCAL_POOL, 1, cap=4)
    with DataSet(g, [backend], RuntimeConfig(batch_size=1, prefetch_capacity=4)) as ds:
        ds.assign(1, backend.variant(2))
        ds.insert_default_prefetch()
        ds.next_batch()
        tuner = Tuner(ds, TunerConfig(interval=0.05))
        deadline = time.monotonic() + 10
        while ds.buffer_occupancy("output")[0] < 4 and time.monotonic() < deadline:
            time.sleep(0.02)
        acts = [tuner.step() for _ in range(2)]
        tuner.stop()
        assert [a.state for a in acts] == [OVER, OVER]
        assert ds.variant(1).is_base and acts[1].held == 0
        ds.abort_epoch()
