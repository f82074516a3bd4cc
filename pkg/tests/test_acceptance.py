"""Acceptance gate.

Each test checks one acceptance criterion at its stated tolerance and time
limit and prints a single PASS/FAIL line, visible even under output capture.
"""
import collections
import random
import time

from helpers import FlakyProxy, chain, compare_bundle, compare_remote_local, fuzz_worker, kill_executors, \
    random_payload, stats_for
from oracles import ChainOracle, brute_orderings, random_constrained_chain, random_instance
from sluice import transforms
from sluice.bench import run_scenario
from sluice.graph import Step
from sluice.graph.constraints import reordered
from sluice.graph.model import TransformSpec
from sluice.graph.sample import DataSample
from sluice.optimizer import (
    CostModelParams, Plan, cost_base, cost_reordered, cost_with_cache, enumerate_reorderings, explain, f_fraction,
    fuse_and_offload_pass, fused_cost, fusion_io_factor, insert_cache_pass, optimize, reorder_pass,
    reordered_input_size, size_scaling,
)
from sluice.optimizer.cost import offload_cost_from
from sluice.reliability import Checkpoint, SplitLedger
from sluice.remote.worker import WorkerProcess
from sluice.runtime.dataset import DataSet, RuntimeConfig
from sluice.runtime.variants import LOCAL_POOL, Backend, parse_backend
from sluice.telemetry import MetadataStore, TraceRecord
from test_optimizer import _cost_r_fixture, ident, sized_chain

REL = 1e-9


def verdict(capsys, label, ok, elapsed, limit, detail=""):
    passed = ok and elapsed < limit
    line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail} [{elapsed:.1f}s, limit {limit:g}s]"
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line
    assert elapsed < limit, line


def close(got, expected):
    if expected == 0:
        return abs(got) <= 1e-15
    return abs(got - expected) <= REL * abs(expected)


# cost model fixtures ---------------------------------------------------------------

def _fixtures():
    out = []
    st3 = stats_for(ident(2), {0: 0.002, 1: 0.003, 2: 0.005}, tput_base=100.0)
    out += [(f"f({p})", f_fraction(p, st3), e) for p, e in zip((0, 1, 2), (0.2, 0.3, 0.5))]
    st0 = stats_for(ident(2), {0: 0.0, 1: 0.001, 2: 0.003})
    out += [(f"f({p}) idle source", f_fraction(p, st0), e) for p, e in zip((0, 1, 2), (0.0, 0.25, 0.75))]
    out += [(f"cost_base({p})", cost_base(p, st3), e) for p, e in zip((0, 1, 2), (0.002, 0.003, 0.005))]

    out.append(("S shrink", size_scaling(1, stats_for(ident(1), {0: 1, 1: 1}, {1: 1000}, {1: 250})), 0.25))
    filt = MetadataStore([1])
    for i in range(10):
        filt.record(DataSample((0, i), 0, trace=[TraceRecord(1, 10, 400, 0 if i % 2 else 400)]))
    out.append(("S with filtered samples", size_scaling(1, filt), 0.5))

    g, st_ = sized_chain(1000.0, [0.25, 1.0])
    out.append(("size_in_R behind shrinker", reordered_input_size(Plan.baseline(g), 2, st_), 250.0))
    plan, st_ = _cost_r_fixture(1.0)
    out.append(("size_in_R moved pipe", reordered_input_size(plan, 2, st_), 400.0))
    out.append(("cost_R ratio 1/2", cost_reordered(plan, 2, st_), 0.002))
    plan, st_ = _cost_r_fixture(2.0)
    out.append(("cost_R exponent 2", cost_reordered(plan, 2, st_), 0.001))

    out.append(("offload exact", offload_cost_from(0.4, 0.5, 2.0), 0.0))
    out.append(("offload partial", offload_cost_from(1.0, 0.25, 1.25), 0.2))
    out.append(("offload clamp", offload_cost_from(1.0, 0.25, 2.0), 0.0))

    g, st_ = sized_chain(100.0, [4.0, 1.0])
    out.append(("io two pipes", fusion_io_factor((1, 2), Plan.baseline(g), st_), 500 / 1300))
    g, st_ = sized_chain(100.0, [2.0, 1.5, 1.0])
    out.append(("io three pipes", fusion_io_factor((1, 2, 3), Plan.baseline(g), st_), 400 / 1400))
    g, st_ = sized_chain(100.0, [1.0, 1.0], lat={0: 0.0, 1: 1.0, 2: 1.0}, tput_base=2.5)
    out.append(("fused cost", fused_cost((1, 2), None, Plan.baseline(g), st_), 0.2))

    params = CostModelParams(d=1e-8)
    g, st_ = sized_chain(1e6, [1.0], lat={0: 0.0, 1: 0.01})
    out.append(("cache after pipe", cost_with_cache(Plan.baseline(g), 1, st_, params), 0.01))
    g, st_ = sized_chain(5e5, [0.5], lat={0: 0.004, 1: 0.006}, tput_base=100.0)
    out.append(("cache after source", cost_with_cache(Plan.baseline(g), 0, st_, params), 0.006 + 0.005))
    return out


def test_cost_model_fixtures(capsys):
    t0 = time.perf_counter()
    rows = _fixtures()
    bad = [(name, got, exp) for name, got, exp in rows if not close(got, exp)]
    verdict(capsys, "cost model fixtures", not bad, time.perf_counter() - t0, 1,
            f"{len(rows) - len(bad)}/{len(rows)} within rel 1e-9" + (f", off: {bad}" if bad else ""))


# optimizer oracles ---------------------------------------------------------------

def test_reorder_enumeration_matches_brute_force(capsys):
    t0 = time.perf_counter()
    rng = random.Random(2024)
    bad = []
    for k in range(200):
        g, pinned, depends = random_constrained_chain(rng, max_pipes=7)
        expected = set(brute_orderings(pinned, depends))
        for method in ("extensions", "recursive"):
            got = enumerate_reorderings(g, method)
            if len(got) != len(set(got)) or set(got) != expected:
                bad.append((k, method))
    verdict(capsys, "reorder enumeration oracle", not bad, time.perf_counter() - t0, 30,
            f"200 graphs, {len(bad)} mismatches")


def test_passes_match_exhaustive_minimum(capsys):
    t0 = time.perf_counter()
    rng = random.Random(77)
    bad = []
    for k in range(100):
        inst = random_instance(rng, max_pipes=5, max_variants=3)
        g = inst.graph()
        st_ = inst.stats(g)
        params = CostModelParams(d=inst.d)
        oracle = ChainOracle(inst)
        p1 = reorder_pass(Plan.baseline(g), st_, params)
        _, p2 = insert_cache_pass(p1, st_, params)
        _, _, p3 = fuse_and_offload_pass(p2, st_, inst.backends, params)
        checks = [
            close(p1.cost, oracle.best_reorder()),
            close(p2.cost, oracle.best_cache(p1.ordering)),
            close(p3.cost, oracle.best_fuse_offload(p2.ordering, p2.cache_site)),
        ]
        a, b = optimize(g, st_, inst.backends, params), optimize(g, st_, inst.backends, params)
        checks.append(a.to_dict() == b.to_dict() and explain(a, st_, params) == explain(b, st_, params))
        if not all(checks):
            bad.append((k, checks))
    verdict(capsys, "pass optimality oracle", not bad, time.perf_counter() - t0, 120,
            f"100 instances, {len(bad)} off the exhaustive minimum or nondeterministic")


# identity preservation ---------------------------------------------------------------

CHAIN_STEPS = [
    lambda r: Step.of("decode", factor=2),
    lambda r: Step.of("flip").randomize(),
    lambda r: Step.of("crop", frac=0.5),
    lambda r: Step.of("drop_mod", modulus=r.randint(2, 7)),
    lambda r: Step.of("truncate", max_len=48),
    lambda r: Step.of("identity"),
    lambda r: Step.of("jitter").randomize(),
]
N_IDS = 256


def _identity_trial(rng, endpoint):
    k = rng.randint(1, 4)
    g = chain(*[rng.choice(CHAIN_STEPS)(rng) for _ in range(k)], n=N_IDS, split_size=16,
              seed=rng.randrange(1000))
    g = reordered(g, rng.choice(enumerate_reorderings(g)))
    remote = parse_backend(f"remote:{endpoint}:1")
    local = Backend(LOCAL_POOL, 1, cap=64)
    cfg = RuntimeConfig(batch_size=rng.choice([8, 32]), shards=rng.randint(1, 4), seed=rng.randrange(100))
    with DataSet(g, [remote, local], cfg) as ds:
        for p in range(1, k + 1):
            c = rng.random()
            if c < 0.35:
                ds.assign(p, remote.variant(rng.randint(1, 2)))
            elif c < 0.55:
                ds.assign(p, local.variant(rng.randint(1, 2)))
        ids = [i for b in ds for i in b.ids]
    return collections.Counter(ids) == collections.Counter((0, q) for q in range(N_IDS))


def test_each_sample_delivered_exactly_once(capsys, worker):
    t0 = time.perf_counter()
    rng = random.Random(4)
    failed = [t for t in range(500) if not _identity_trial(rng, worker.endpoint)]
    verdict(capsys, "identity preservation", not failed, time.perf_counter() - t0, 300,
            f"500 random plans on {N_IDS} samples, {len(failed)} not exactly-once")


# fault tolerance --------------------------------------------------------------------

FAULT_IDS = 128


def _ledger_round_trip_ok(ck) -> bool:
    doc = Checkpoint.from_dict(ck.to_dict())
    again = SplitLedger.restore(doc).checkpoint()
    return again == ck and SplitLedger.restore(again).checkpoint() == ck


def _fault_schedule(rng, worker, proxy) -> tuple:
    steps = [Step.of("decode", factor=2), Step.of("drop_mod", modulus=rng.randint(2, 9)), Step.of("flip")]
    g = chain(*steps, n=FAULT_IDS, split_size=16, seed=rng.randrange(1000))
    via = proxy.endpoint if rng.random() < 0.5 else worker.endpoint
    remote = parse_backend(f"remote:{via}:{rng.randint(1, 2)}")
    cfg = RuntimeConfig(batch_size=rng.choice([4, 8, 16]), shards=rng.choice([1, 1, 1, 2]),
                        seed=rng.randrange(50))
    at = sorted(rng.sample(range(FAULT_IDS // cfg.batch_size), rng.randint(1, 3)))
    faults = [(i, rng.choice(["kill", "drop", "checkpoint"])) for i in at]
    assignment = {p: remote.variant() for p in (1, 2, 3) if rng.random() < 0.6}
    delivered, round_trips = [], True

    def open_dataset():
        ds = DataSet(g, [remote], cfg)
        for p, v in assignment.items():
            ds.assign(p, v)
        return ds

    ds = open_dataset()
    try:
        ds.start_epoch()
        i = 0
        while True:
            b = ds.next_batch()
            if b is None:
                break
            delivered += b.ids
            while faults and faults[0][0] == i:
                _, kind = faults.pop(0)
                if kind == "kill":
                    kill_executors(worker, rng, rng.randint(1, 2))
                elif kind == "drop":
                    proxy.drop(rng, rng.randint(1, 2))
                else:
                    ck = ds.checkpoint()
                    round_trips &= _ledger_round_trip_ok(ck)
                    if ck.epoch != 0:  # the epoch already completed
                        faults = []
                        break
                    ds.abort_epoch()
                    ds.close()
                    ds = open_dataset()
                    ds.restore(Checkpoint.from_dict(ck.to_dict()))
                    ds.start_epoch()
            i += 1
    finally:
        ds.close()
    exact = collections.Counter(delivered) == collections.Counter((0, q) for q in range(FAULT_IDS))
    return exact, round_trips


def test_exactly_once_under_faults(capsys):
    t0 = time.perf_counter()
    w = WorkerProcess("127.0.0.1:0", parallelism=512)
    proxy = FlakyProxy(w.endpoint)
    rng = random.Random(5)
    lost, not_idempotent = [], []
    try:
        for k in range(1000):
            exact, round_trips = _fault_schedule(rng, w, proxy)
            if not exact:
                lost.append(k)
            if not round_trips:
                not_idempotent.append(k)
    finally:
        proxy.close()
        w.stop()
    verdict(capsys, "fault tolerance", not lost and not not_idempotent, time.perf_counter() - t0, 600,
            f"1000 schedules of kills, drops and restores; {len(lost)} not exactly-once, "
            f"{len(not_idempotent)} checkpoint round trips changed")


# remote transparency ----------------------------------------------------------------

def test_remote_matches_local_and_survives_fuzzing(capsys, worker):
    t0 = time.perf_counter()
    names = sorted(k for k, e in transforms.REGISTRY.items() if e.fn is not None)
    rng = random.Random(6)
    mismatched = {}
    for name in names:
        bad = compare_remote_local(worker.endpoint, name, [random_payload(rng) for _ in range(100)])
        if bad:
            mismatched[name] = len(bad)
    fused = [TransformSpec.make("decode", factor=2), TransformSpec.make("crop", frac=0.5, random=True),
             TransformSpec.make("chunk", parts=3), TransformSpec.make("drop_random", p=0.3)]
    bad = compare_bundle(worker.endpoint, fused, [random_payload(rng) for _ in range(100)])
    if bad:
        mismatched["fused"] = len(bad)
    pid = worker.pid
    fuzz = fuzz_worker(worker.endpoint, random.Random(7), 10_000)
    alive = worker.alive() and worker.pid == pid and not compare_remote_local(worker.endpoint, "identity", [b"ok"])
    ok = not mismatched and fuzz["crashed"] == 0 and fuzz["frames"] == 10_000 and alive
    verdict(capsys, "remote transparency", ok, time.perf_counter() - t0, 300,
            f"{len(names)} transforms + fused bundle x 100 payloads, mismatches {mismatched or 0}; "
            f"10000 fuzz frames, {fuzz['crashed']} crashed sessions, daemon alive={alive}")


# bench phenomena --------------------------------------------------------------------

PHENOMENA = {
    "reorder": ["speedup_at_least_1.5x"],
    "offload": ["selective_beats_offload_all"],
    "fusion": ["partial_beats_none", "partial_beats_full"],
    "cache": ["declines_inflating_prefix"],
    "prefetch": ["overlap_bound_holds"],
}


def test_bench_phenomena(capsys):
    parts, ok, slowest = [], True, 0.0
    for name, keys in PHENOMENA.items():
        t0 = time.perf_counter()
        rep = run_scenario(name)
        took = time.perf_counter() - t0
        slowest = max(slowest, took)
        good = all(rep.checks.get(k) for k in keys) and took < 120
        ok &= good
        ratios = ", ".join(f"{k} {v:.2f}" for k, v in rep.ratios.items())
        parts.append(f"{name} {'ok' if good else 'FAILED'} ({ratios}; {took:.0f}s)")
    verdict(capsys, "bench phenomena", ok, slowest, 120, "; ".join(parts) + "; time shown is the slowest")


def test_tuner_converges_to_minimal_workers(capsys):
    t0 = time.perf_counter()
    rep = run_scenario("autotune-sweep")
    took = time.perf_counter() - t0
    demands = sorted(k for k in rep.details if k.startswith("demand_"))
    targets = {k: rep.details[k]["target"] for k in demands}
    cap = max(int(w) for w in rep.details["sweep"])
    spans = min(targets.values()) == 0 and max(targets.values()) == cap and len(set(targets.values())) == 3
    converged = all(rep.details[k]["converged_at"] is not None for k in demands)
    low = min(demands, key=lambda k: float(k.split("_")[1]))
    base = rep.details[low]["final_variant"] == "base"
    detail = "; ".join(f"{k}: target {targets[k]}, converged at {rep.details[k]['converged_at']}, "
                       f"final {rep.details[k]['final_variant']}" for k in demands)
    verdict(capsys, "tuner convergence", spans and converged and base, took, 600, detail)


def test_ablation_is_monotone_with_3x_speedup(capsys):
    t0 = time.perf_counter()
    rep = run_scenario("ablation")
    took = time.perf_counter() - t0
    steps = {k: v for k, v in rep.ratios.items() if k != "cumulative_speedup"}
    ok = all(v <= 1.10 for v in steps.values()) and rep.ratios["cumulative_speedup"] >= 3.0
    verdict(capsys, "ablation", ok, took, 300,
            ", ".join(f"{k} {v:.2f}" for k, v in rep.ratios.items()))

