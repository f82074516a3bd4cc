"""Built-in benchmark scenarios.

Each scenario builds a synthetic pipeline, runs it with and without one
optimization, and reports wall times, ratios and pass/fail checks.
"""
from __future__ import annotations

import copy
import time
from importlib import resources
from typing import Callable, Optional

import yaml

from ..autotune import Tuner, TunerConfig
from ..errors import UnknownScenario
from ..graph.model import LogicalGraph, PipeNode, Step, TransformSpec, attach_source, compose, splice_after
from ..graph.sources import SyntheticSource
from ..optimizer import CostModelParams, Plan, explain, optimize, reorder_pass
from ..runtime.dataset import DataSet, RuntimeConfig, apply_plan
from ..runtime.variants import LOCAL_POOL, Backend
from ..telemetry import profile
from .report import BenchReport, RunRecord, SyntheticOpSpec


def load_defaults() -> dict:
    text = resources.files("sluice.bench").joinpath("defaults.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, over: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build(steps, source) -> LogicalGraph:
    return attach_source(compose(steps), source)


def timed_epoch(ds: DataSet, consumer: Optional[Callable] = None) -> tuple:
    """Consume one epoch; returns (delivered ids, wall seconds)."""
    t0 = time.perf_counter()
    n = 0
    for b in ds:
        n += len(b.ids)
        if consumer is not None:
            consumer(b)
    return n, time.perf_counter() - t0


def latency_table(store, graph) -> dict:
    out = {}
    for pid in graph.pipe_ids:
        lat = store.pipe(pid).lat_base
        if lat is not None:
            out[pid] = lat
    return out


def _params(cfg, d=1e-8, cores=1) -> CostModelParams:
    return CostModelParams(d=d, cores=cores)


def _profile(g, cfg, backends=(), n=None):
    return profile(g, backends, n_samples=n or min(len(g.bindings[0][1]), 2 * cfg["split_size"]))


# scenarios ----------------------------------------------------------------------

def scenario_reorder(cfg: dict, seed: int, log=None) -> BenchReport:
    rep = BenchReport("reorder")
    src = SyntheticSource(cfg["samples"], size=cfg["payload"], seed=seed, split_size=cfg["split_size"])
    g = build([Step.of("decode", factor=cfg["inflate"]),
               SyntheticOpSpec("heavy", compute_ns_per_byte=cfg["heavy_ns_per_byte"]).step(),
               Step.of("crop", frac=cfg["crop"])], src)
    stats = _profile(g, cfg)
    params = _params(cfg)
    plan = reorder_pass(Plan.baseline(g), stats, params)
    with DataSet(g) as ds:
        rep.runs.append(RunRecord("baseline", *timed_epoch(ds), plan="topological order"))
    with apply_plan(DataSet(g), plan) as ds:
        rep.runs.append(RunRecord("reordered", *timed_epoch(ds), plan=str(list(plan.ordering))))
    speedup = rep.run("baseline").wall_s / rep.run("reordered").wall_s
    rep.ratios = {"optimized_over_baseline_time": 1 / speedup, "speedup": speedup}
    rep.checks = {"speedup_at_least_1.5x": speedup >= 1.5}
    rep.latencies["profile"] = latency_table(stats, g)
    rep.explanation = explain(plan, stats, params)
    return rep


def scenario_offload(cfg: dict, seed: int, log=None) -> BenchReport:
    rep = BenchReport("offload")
    src = SyntheticSource(cfg["samples"], size=cfg["payload"], seed=seed, split_size=cfg["split_size"])
    par = cfg["parallelism"]
    g = build([SyntheticOpSpec("heavy", compute_us=cfg["heavy_us"], remote_speedup_hint=par).step(),
               Step.of("decode", factor=cfg["inflate"]), Step.of("flip")], src)
    backend = Backend(LOCAL_POOL, par, cap=4 * par, link_bandwidth=cfg["link_bandwidth"],
                      rpc_overhead_us=cfg["rpc_overhead_us"])
    runs = {"baseline": [], "offload_all": [1, 2, 3], "offload_heavy_only": [1]}
    for label, pipes in runs.items():
        with DataSet(g, [backend]) as ds:
            for p in pipes:
                ds.assign(p, backend.variant())
            ds.insert_default_prefetch()
            rep.runs.append(RunRecord(label, *timed_epoch(ds), plan=f"offloaded {pipes}"))
    t = {r.label: r.wall_s for r in rep.runs}
    rep.ratios = {"all_over_selective_time": t["offload_all"] / t["offload_heavy_only"],
                  "baseline_over_selective_time": t["baseline"] / t["offload_heavy_only"]}
    rep.checks = {"selective_beats_offload_all": t["offload_heavy_only"] < t["offload_all"],
                  "selective_beats_baseline": t["offload_heavy_only"] < t["baseline"]}
    return rep


def scenario_fusion(cfg: dict, seed: int, log=None) -> BenchReport:
    rep = BenchReport("fusion")
    src = SyntheticSource(cfg["samples"], size=cfg["payload"], seed=seed, split_size=cfg["split_size"])
    par = cfg["parallelism"]
    g = build([SyntheticOpSpec("a", compute_us=cfg["stage_us"]).step(),
               SyntheticOpSpec("b", compute_us=cfg["stage_us"]).step(),
               Step.of("decode", factor=cfg["inflate"])], src)
    backend = Backend(LOCAL_POOL, par, cap=4 * par, link_bandwidth=cfg["link_bandwidth"],
                      rpc_overhead_us=cfg["rpc_overhead_us"])
    layouts = {"no_fusion": ([1, 2], None), "partial_fusion": ([1, 2], [1, 2]),
               "full_fusion": ([1, 2, 3], [1, 2, 3])}
    for label, (offloaded, group) in layouts.items():
        with DataSet(g, [backend]) as ds:
            for p in offloaded:
                ds.assign(p, backend.variant())
            if group:
                ds.fuse(group)
            ds.insert_default_prefetch()
            rep.runs.append(RunRecord(label, *timed_epoch(ds), plan=f"offloaded {offloaded}, fused {group}"))
    t = {r.label: r.wall_s for r in rep.runs}
    rep.ratios = {"none_over_partial_time": t["no_fusion"] / t["partial_fusion"],
                  "full_over_partial_time": t["full_fusion"] / t["partial_fusion"]}
    rep.checks = {"partial_beats_none": t["partial_fusion"] < t["no_fusion"],
                  "partial_beats_full": t["partial_fusion"] < t["full_fusion"]}
    return rep


def scenario_cache(cfg: dict, seed: int, log=None) -> BenchReport:
    rep = BenchReport("cache")
    bw = float(cfg["disk_bandwidth"])
    params = _params(cfg, d=1.0 / bw)
    rc = RuntimeConfig(disk_bandwidth=bw)
    explanations = []

    sh = cfg["shrinking"]
    src = SyntheticSource(cfg["samples"], size=sh["payload"], seed=seed, split_size=cfg["split_size"],
                          read_cost_us=sh["read_cost_us"])
    g = build([SyntheticOpSpec("heavy", compute_us=sh["heavy_us"]).step(), Step.of("crop", frac=sh["crop"])], src)
    stats = _profile(g, cfg)
    plan = optimize(g, stats, (), params)
    explanations.append("shrinking prefix:\n" + explain(plan, stats, params))
    with apply_plan(DataSet(g, config=rc), plan) as ds:
        rep.runs.append(RunRecord("shrinking_epoch1", *timed_epoch(ds), plan=f"cache at {plan.cache_site}"))
        rep.runs.append(RunRecord("shrinking_epoch2", *timed_epoch(ds), plan=f"cache at {plan.cache_site}"))
    shrink_site = plan.cache_site

    inf = cfg["inflating"]
    src = SyntheticSource(cfg["samples"], size=inf["payload"], seed=seed, split_size=cfg["split_size"],
                          read_cost_us=inf["read_cost_us"])
    g = build([Step.of("decode", factor=inf["inflate"]), Step.of("flip")], src)
    stats = _profile(g, cfg)
    plan = optimize(g, stats, (), params)
    explanations.append("inflating prefix:\n" + explain(plan, stats, params))
    with apply_plan(DataSet(g, config=rc), plan) as ds:
        timed_epoch(ds)
        rep.runs.append(RunRecord("inflating_as_planned", *timed_epoch(ds), plan=f"cache at {plan.cache_site}"))
    with DataSet(g, config=rc) as ds:
        timed_epoch(ds)
        rep.runs.append(RunRecord("inflating_no_cache", *timed_epoch(ds), plan="no cache"))
    with DataSet(g, config=rc) as ds:
        cache = PipeNode(100, TransformSpec("cache", (), "cache"), fixed=True)
        ds.register(cache)
        ds.update_dfg(splice_after(ds.graph, 1, cache))
        rep.runs.append(RunRecord("inflating_forced_epoch1", *timed_epoch(ds), plan="cache after decode"))
        rep.runs.append(RunRecord("inflating_forced_epoch2", *timed_epoch(ds), plan="cache after decode"))
    t = {r.label: r.wall_s for r in rep.runs}
    rep.details = {"shrinking_cache_site": shrink_site, "inflating_cache_site": plan.cache_site}
    rep.ratios = {"shrinking_epoch2_over_epoch1": t["shrinking_epoch2"] / t["shrinking_epoch1"],
                  "forced_cache_over_no_cache": t["inflating_forced_epoch2"] / t["inflating_no_cache"]}
    rep.checks = {"caches_shrinking_prefix": shrink_site is not None,
                  "cache_speeds_up_epoch2": t["shrinking_epoch2"] < t["shrinking_epoch1"],
                  "declines_inflating_prefix": plan.cache_site is None,
                  "declining_was_right": t["inflating_forced_epoch2"] > t["inflating_no_cache"]}
    rep.explanation = "\n".join(explanations)
    return rep


def scenario_prefetch(cfg: dict, seed: int, log=None) -> BenchReport:
    rep = BenchReport("prefetch")
    bs, batches = cfg["batch_size"], cfg["batches"]
    src = SyntheticSource(bs * batches, size=256, seed=seed, split_size=bs * 10)
    g = build([SyntheticOpSpec("work", compute_us=cfg["op_us"]).step()], src)
    t_consumer = cfg["consumer_ms"] / 1e3
    rc = RuntimeConfig(batch_size=bs)

    def consume(_):
        time.sleep(t_consumer)

    with DataSet(g, config=rc) as ds:
        rep.runs.append(RunRecord("pipeline_only", *timed_epoch(ds)))
        rep.runs.append(RunRecord("no_prefetch", *timed_epoch(ds, consume)))
    with DataSet(g, config=rc) as ds:
        ds.insert_default_prefetch()
        rep.runs.append(RunRecord("prefetch", *timed_epoch(ds, consume)))
    p = rep.run("pipeline_only").wall_s / batches
    bound = (1 + cfg["delta"]) * max(t_consumer, p) * batches
    t = rep.run("prefetch").wall_s
    rep.details = {"per_batch_pipeline_s": p, "per_batch_consumer_s": t_consumer, "bound_s": bound}
    rep.ratios = {"prefetch_over_bound": t / bound,
                  "no_prefetch_over_prefetch": rep.run("no_prefetch").wall_s / t}
    rep.checks = {"overlap_bound_holds": t <= bound and p < t_consumer}
    return rep


def _ablation_graph(cfg, seed):
    src = SyntheticSource(cfg["samples"], size=cfg["payload"], seed=seed, split_size=cfg["split_size"],
                          read_cost_us=cfg["read_cost_us"])
    return build([SyntheticOpSpec("decode", compute_ns_per_byte=cfg["decode_ns_per_byte"],
                                  size_factor=cfg["inflate"]).step(),
                  Step.of("crop", frac=cfg["crop"]),
                  SyntheticOpSpec("heavy1", compute_us=cfg["heavy_us"]).step(),
                  SyntheticOpSpec("heavy2", compute_us=cfg["heavy_us"]).step(),
                  Step.of("flip")], src)


def scenario_ablation(cfg: dict, seed: int, log=None) -> BenchReport:
    """Enable parallelism, reordering, offloading and fusion one after another."""
    rep = BenchReport("ablation")
    g = _ablation_graph(cfg, seed)
    shards, budget = cfg["shards"], cfg["executors_per_driver"]
    backend = Backend(LOCAL_POOL, budget, cap=budget * shards)
    stats = _profile(g, cfg)
    params = _params(cfg)
    plan = reorder_pass(Plan.baseline(g), stats, params)
    heavy = [n.id for n in g.nodes if n.tag in ("heavy1", "heavy2")]

    def configure(step):
        ds = DataSet(g, [backend])
        if step >= 2:
            apply_plan(ds, plan.with_(shards=1))
        if step >= 1:
            ds.set_shards(shards)
        if step == 3:
            for p in heavy:  # the driver's executors are split over the offloaded pipes
                ds.assign(p, backend.variant(budget // len(heavy)))
        if step == 4:
            for p in heavy:
                ds.assign(p, backend.variant(budget))
            ds.fuse(heavy)
        if step >= 3:
            ds.insert_default_prefetch()
        return ds

    labels = ["baseline", "+parallelism", "+reordering", "+offloading", "+fusion"]
    for step, label in enumerate(labels):
        with configure(step) as ds:
            rep.runs.append(RunRecord(label, *timed_epoch(ds), plan=str(sorted(ds.assignment))))
        if log:
            log(f"{label}: {rep.runs[-1].wall_s:.2f}s")
    walls = [r.wall_s for r in rep.runs]
    tol = cfg["tolerance"]
    rep.ratios = {f"{labels[i]}_over_{labels[i - 1]}": walls[i] / walls[i - 1] for i in range(1, len(walls))}
    rep.ratios["cumulative_speedup"] = walls[0] / walls[-1]
    rep.checks = {f"{labels[i]}_no_regression": walls[i] <= (1 + tol) * walls[i - 1] for i in range(1, len(walls))}
    rep.checks["cumulative_speedup_at_least_3x"] = walls[0] / walls[-1] >= 3.0
    rep.latencies["profile"] = latency_table(stats, g)
    rep.explanation = explain(plan, stats, params)
    return rep


def _tune_graph(cfg, n, seed):
    src = SyntheticSource(n, size=cfg["payload"], seed=seed, split_size=cfg["split_size"])
    return build([SyntheticOpSpec("op", compute_us=cfg["op_us"]).step()], src)


def sweep_throughput(cfg: dict, seed: int = 0) -> dict:
    """Steady throughput of the offloaded operator at every static worker count (0 = base)."""
    out = {}
    backend = Backend(LOCAL_POOL, 1, cap=cfg["cap"])
    for w in range(cfg["cap"] + 1):
        rate = 1e6 / cfg["op_us"] * max(w, 1)
        n = max(3 * cfg["split_size"], int(rate * cfg["sweep_seconds"]))
        with DataSet(_tune_graph(cfg, n, seed), [backend]) as ds:
            if w:
                ds.assign(1, backend.variant(w))
            ds.insert_default_prefetch()
            out[w] = ds.measure_throughput()
    return out


def minimal_workers(sweep: dict, demand: float) -> int:
    """Fewest workers whose measured throughput meets ``demand`` (0 = base; cap if none)."""
    for w in sorted(sweep):
        if sweep[w] >= demand:
            return w
    return max(sweep)


def converged_at(series: list, target: int, within: int, tolerance: int = 1, share: float = 1.0):
    """First interval <= ``within`` from which the series stays near ``target``.

    ``share`` below 1 tolerates that fraction of later excursions.
    """
    for k in range(min(within, len(series) - 1) + 1):
        tail = series[k:]
        near = [abs(x - target) <= tolerance for x in tail]
        if near[0] and sum(near) / len(near) >= share:
            return k
    return None


def tune_against_demand(cfg: dict, demand: float, seed: int = 0, log_path=None) -> tuple:
    """Consume at a fixed rate while the tuner runs; returns (tuner actions, final variant)."""
    total = cfg["interval"] * cfg["intervals"]
    n = int(demand * total * 1.5) + 4 * cfg["split_size"]
    backend = Backend(LOCAL_POOL, 1, cap=cfg["cap"])
    with DataSet(_tune_graph(cfg, n, seed), [backend], RuntimeConfig(batch_size=cfg["batch_size"])) as ds:
        ds.assign(1, backend.variant(1))
        ds.insert_default_prefetch()
        ds.start_epoch()
        tuner = Tuner(ds, TunerConfig(interval=cfg["interval"], seed=seed), log_path)
        t0 = time.monotonic()
        k = 0
        with tuner:
            while len(tuner.actions) < cfg["intervals"]:
                b = ds.next_batch()
                if b is None:
                    break
                k += len(b.ids)
                lag = t0 + k / demand - time.monotonic()
                if lag > 0:
                    time.sleep(lag)
        final = ds.variant(1)
        ds.abort_epoch()
    return tuner.actions, final


def scenario_autotune(cfg: dict, seed: int, log=None) -> BenchReport:
    rep = BenchReport("autotune-sweep")
    sweep = sweep_throughput(cfg, seed)
    rep.details["sweep"] = sweep
    if log:
        log("sweep: " + ", ".join(f"{w}:{t:.0f}/s" for w, t in sweep.items()))
    steady = []
    for demand in cfg["demands"]:
        actions, final = tune_against_demand(cfg, demand, seed)
        series = [a.held for a in actions]
        target = minimal_workers(sweep, demand)
        k = converged_at(series, target, 20)
        rep.actions.extend(dict(a.__dict__, demand=demand) for a in actions)
        rep.details[f"demand_{demand}"] = {"target": target, "series": series, "converged_at": k,
                                           "final_variant": final.key()}
        rep.checks[f"demand_{demand}_converges"] = k is not None
        if target == 0:
            rep.checks[f"demand_{demand}_uses_base"] = final.is_base
        steady.append(sorted(series[len(series) // 2:])[len(series[len(series) // 2:]) // 2])
        if log:
            log(f"demand {demand}/s: target {target}, workers {series}")
    rep.details["steady_workers"] = steady
    rep.checks["monotone_in_demand"] = all(a <= b for a, b in zip(steady, steady[1:]))
    return rep


SCENARIOS = {
    "offload": scenario_offload,
    "fusion": scenario_fusion,
    "cache": scenario_cache,
    "reorder": scenario_reorder,
    "prefetch": scenario_prefetch,
    "ablation": scenario_ablation,
    "autotune-sweep": scenario_autotune,
}


def run_scenario(name: str, overrides: Optional[dict] = None, seed: Optional[int] = None, log=None) -> BenchReport:
    if name not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    defaults = load_defaults()
    cfg = _merge(defaults[name], overrides)
    return SCENARIOS[name](cfg, defaults["seed"] if seed is None else seed, log)
