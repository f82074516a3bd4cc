"""Command-line entry points.

Exit codes::

    0  success
    1  generic failure (including a bench scenario whose checks failed)
    2  usage error or unreadable input file
    3  invalid pipeline, source or graph
    4  statistics missing for the requested optimization
    5  a backend could not be reached
    6  execution failed (transform error, stall, capacity)
    7  checkpoint unreadable or incompatible
    8  unknown bench scenario
"""
from __future__ import annotations

import argparse
import importlib
import json
import os
import signal
import sys
import time
from pathlib import Path

import yaml

from . import telemetry
from .autotune import Tuner, TunerConfig
from .bench import BenchReport, RunRecord, run_scenario
from .bench.scenarios import latency_table
from .errors import (
    BackendUnavailable,
    GraphError,
    MissingStats,
    OptimizerError,
    ReliabilityError,
    RemoteError,
    RuntimeFailure,
    SluiceError,
    UnknownScenario,
)
from .graph.model import attach_source
from .graph.sources import DEFAULT_SPLIT_SIZE, parse_source_arg
from .graph.specfile import load_spec
from .optimizer import CostModelParams, explain, optimize
from .optimizer.plan import FALLBACK_DISK_FACTOR
from .reliability import Checkpoint
from .runtime.dataset import DataSet, RuntimeConfig, apply_plan
from .runtime.variants import parse_backend

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_MISSING_STATS = 4
EXIT_BACKEND = 5
EXIT_EXECUTION = 6
EXIT_CHECKPOINT = 7
EXIT_SCENARIO = 8


def exit_code(exc: BaseException) -> int:
    """Map an exception to the documented exit status."""
    if isinstance(exc, UnknownScenario):
        return EXIT_SCENARIO
    if isinstance(exc, MissingStats):
        return EXIT_MISSING_STATS
    if isinstance(exc, BackendUnavailable):
        return EXIT_BACKEND
    if isinstance(exc, ReliabilityError):
        return EXIT_CHECKPOINT
    if isinstance(exc, (GraphError, OptimizerError)):
        return EXIT_VALIDATION
    if isinstance(exc, (RuntimeFailure, RemoteError)):
        return EXIT_EXECUTION
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_USAGE
    return EXIT_GENERIC


def _thresholds(text: str) -> tuple:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LOW,HIGH, e.g. 0.25,0.75") from None
    return lo, hi


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _log(quiet: bool):
    if quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


# shared pieces -------------------------------------------------------------

def _load_plugins(mods) -> tuple:
    for m in mods:
        importlib.import_module(m)
    return tuple(mods)


def _graph(args):
    graph, default = load_spec(args.spec)
    if args.source:
        source = parse_source_arg(args.source, args.split_size)
    elif default is not None:
        source = default
    else:
        raise GraphError("no source given: pass --source or add one to the spec file")
    if not graph.bindings:
        graph = attach_source(graph, source)
    return graph


def _params(args) -> CostModelParams:
    return CostModelParams(d=args.disk_factor, cores=args.cores or (os.cpu_count() or 1))


def _config(args, **kw) -> RuntimeConfig:
    return RuntimeConfig(seed=args.seed, batch_size=args.batch_size, plugins=args.plugins, **kw)


def _stats(args, graph, backends, log):
    path = Path(args.stats) if args.stats else None
    if path is not None and path.exists() and not args.restat:
        return telemetry.load(path)
    store = telemetry.profile(graph, backends, args.profile_samples, config=_config(args), log=log)
    if path is not None:
        telemetry.persist(store, path)
    return store


# subcommands ------------------------------------------------------------

def cmd_run(args) -> int:
    log = _log(args.quiet)
    args.plugins = _load_plugins(args.plugin)
    graph = _graph(args)
    backends = [parse_backend(b) for b in args.backend]
    config = _config(args, cache_dir=args.cache_dir)
    plan = explanation = None
    if args.no_optimize:
        ds = DataSet(graph, backends, config)
    else:
        stats = _stats(args, graph, backends, log)
        params = _params(args)
        plan = optimize(graph, stats, backends, params)
        if args.cache == "off" and plan.cache_site is not None:
            plan = plan.with_(cache_site=None).note("cache", disabled="--cache off")
        explanation = explain(plan, stats, params)
        ds = apply_plan(DataSet(graph, backends, config), plan)
    report = BenchReport("run", explanation=explanation or "")
    report.details["plan"] = plan.to_dict() if plan is not None else None
    report.details["epochs"] = []

    stop_dump = _install_stats_dump(ds)
    tuner = None
    try:
        ds.validate_backends()
        if args.resume:
            ds.restore(Checkpoint.load(args.resume))
        if args.tune:
            lo, hi = args.tune_thresholds
            tuner = Tuner(ds, TunerConfig(interval=args.tune_interval, low_threshold=lo,
                                          high_threshold=hi, seed=args.seed), args.tune_log).start()
        while ds.epoch < args.epochs:
            epoch = ds.epoch
            from_cache = ds.cache_ready()
            t0 = time.perf_counter()
            n = batches = 0
            ds.start_epoch()
            while True:
                b = ds.next_batch()
                if b is None:
                    break
                n += len(b.ids)
                batches += 1
                if args.checkpoint_every and batches % args.checkpoint_every == 0:
                    ds.checkpoint().save(args.checkpoint)
            wall = time.perf_counter() - t0
            report.runs.append(RunRecord(f"epoch {epoch}", n, wall))
            report.details["epochs"].append({"epoch": epoch, "samples": n, "read_cache": from_cache})
            if log:
                log(f"epoch {epoch}: {n} samples in {wall:.3f}s" + (" (from cache)" if from_cache else ""))
        if args.checkpoint_every:
            ds.checkpoint().save(args.checkpoint)
    finally:
        if tuner is not None:
            tuner.stop()
            report.actions = [json.loads(a.to_json()) for a in tuner.actions]
        stop_dump()
        report.latencies["run"] = latency_table(ds.store, ds.graph)
        ds.close()
    _emit(report, args)
    return EXIT_OK


def _install_stats_dump(ds):
    """SIGUSR1 prints the live statistics as JSON on stderr."""
    if not hasattr(signal, "SIGUSR1"):
        return lambda: None

    def dump(*_):
        print(json.dumps(ds.store.to_dict(), sort_keys=True), file=sys.stderr, flush=True)

    try:
        prev = signal.signal(signal.SIGUSR1, dump)
    except ValueError:  # not the main thread
        return lambda: None
    return lambda: signal.signal(signal.SIGUSR1, prev)


def _emit(report: BenchReport, args) -> None:
    if not args.quiet:
        sys.stdout.write(report.text())
    if args.report:
        report.save(args.report)


def cmd_explain(args) -> int:
    args.plugins = _load_plugins(args.plugin)
    graph, _ = load_spec(args.spec)
    backends = [parse_backend(b) for b in args.backend]
    stats = telemetry.load(args.stats)
    params = _params(args)
    plan = optimize(graph, stats, backends, params)
    sys.stdout.write(explain(plan, stats, params))
    if args.plan_out:
        plan.save(args.plan_out)
    return EXIT_OK


def cmd_profile(args) -> int:
    args.plugins = _load_plugins(args.plugin)
    graph = _graph(args)
    backends = [parse_backend(b) for b in args.backend]
    store = telemetry.MetadataStore(trace_log=args.trace_log)
    telemetry.profile(graph, backends, args.profile_samples, config=_config(args), store=store,
                      log=_log(args.quiet))
    telemetry.persist(store, args.out)
    return EXIT_OK


def _override(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    return key, yaml.safe_load(value)


def cmd_bench(args) -> int:
    report = run_scenario(args.scenario, dict(args.set), args.seed, _log(args.quiet))
    _emit(report, args)
    return EXIT_OK if report.passed else EXIT_GENERIC


def cmd_worker(args) -> int:
    from .remote.worker import serve

    _load_plugins(args.plugin)
    serve(args.bind, args.parallelism, lambda ep: print(f"LISTENING {ep}", flush=True))
    return EXIT_OK


def cmd_checkpoint_inspect(args) -> int:
    ckpt = Checkpoint.load(args.path)
    if args.json:
        print(json.dumps(ckpt.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    print(f"version: {ckpt.version}")
    print(f"epoch: {ckpt.epoch}")
    print(f"seed: {ckpt.seed}")
    print(f"split_size: {ckpt.split_size}")
    for sid, s in sorted(ckpt.sources.items()):
        in_open = sum(len(v) for v in s["open"].values())
        print(f"source {sid}: {s['n']} samples, {len(s['sealed'])} sealed splits, "
              f"{len(s['open'])} open splits holding {in_open} delivered ids")
    return EXIT_OK


# parser -------------------------------------------------------------------

def _pipeline_args(p, need_source=True) -> None:
    p.add_argument("spec", help="pipeline spec file (YAML)")
    if need_source:
        p.add_argument("--source", help="dir:PATH or synthetic:N[:SIZE[:READ_US]]; default: the spec's own")
        p.add_argument("--split-size", type=_positive, default=DEFAULT_SPLIT_SIZE,
                       help=f"samples per split (default {DEFAULT_SPLIT_SIZE})")
    p.add_argument("--backend", action="append", default=[],
                   help="local:N[:CAP] or remote:HOST:PORT[:N[:BW]]; repeatable")
    p.add_argument("--plugin", action="append", default=[], help="module registering custom transforms")
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed (default 0)")


def _cost_args(p) -> None:
    p.add_argument("--disk-factor", type=float, default=FALLBACK_DISK_FACTOR,
                   help=f"cache read seconds per byte (default {FALLBACK_DISK_FACTOR})")
    p.add_argument("--cores", type=_positive, default=None, help="driver count when sharding (default: CPU count)")


def _profile_args(p) -> None:
    p.add_argument("--profile-samples", type=_positive, default=None,
                   help="samples per profiling run (default 4 splits)")
    p.add_argument("--batch-size", type=_positive, default=32, help="samples per batch (default 32)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sluice", description="Optimize and run streaming input pipelines.",
                                 epilog=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize and execute a pipeline")
    _pipeline_args(p)
    _cost_args(p)
    _profile_args(p)
    p.add_argument("--stats", help="statistics file; profiled and written when absent")
    p.add_argument("--restat", action="store_true", help="profile again even if --stats exists")
    p.add_argument("--no-optimize", action="store_true", help="run the pipeline as written")
    p.add_argument("--epochs", type=_positive, default=1, help="epochs to complete (default 1)")
    p.add_argument("--cache", choices=("auto", "off"), default="auto",
                   help="auto keeps the optimizer's cache choice (default auto)")
    p.add_argument("--cache-dir", help="directory for cache files (default: a temp dir)")
    p.add_argument("--tune", action="store_true", help="run the autotuner during execution")
    p.add_argument("--tune-interval", type=float, default=5.0, help="seconds between tuner steps (default 5)")
    p.add_argument("--tune-thresholds", type=_thresholds, default=(0.25, 0.75),
                   help="LOW,HIGH output buffer fractions (default 0.25,0.75)")
    p.add_argument("--tune-log", help="append tuner actions to this JSONL file")
    p.add_argument("--checkpoint-every", type=_positive, default=None, help="save a checkpoint every N batches")
    p.add_argument("--checkpoint", default="sluice.ckpt", help="checkpoint path (default sluice.ckpt)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("explain", help="print the optimized plan without running it")
    _pipeline_args(p, need_source=False)
    _cost_args(p)
    p.add_argument("--stats", required=True, help="statistics file from `sluice profile`")
    p.add_argument("--plan-out", help="also save the plan as JSON")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("profile", help="collect statistics for a pipeline")
    _pipeline_args(p)
    _profile_args(p)
    p.add_argument("--out", required=True, help="statistics file to write")
    p.add_argument("--trace-log", help="append per-sample trace records (JSONL)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="run a built-in synthetic scenario")
    p.add_argument("scenario", help="offload, fusion, cache, reorder, prefetch, ablation or autotune-sweep")
    p.add_argument("--seed", type=int, default=None, help="default: the defaults file's seed")
    p.add_argument("--set", type=_override, action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario parameter; repeatable")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("worker", help="serve remote executors")
    p.add_argument("--bind", required=True, help="HOST:PORT or unix:PATH")
    p.add_argument("--parallelism", type=_positive, default=1, help="concurrent executors (default 1)")
    p.add_argument("--plugin", action="append", default=[], help="module registering custom transforms")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("checkpoint-inspect", help="summarize a checkpoint file")
    p.add_argument("path")
    p.add_argument("--json", action="store_true", help="print the full checkpoint")
    p.set_defaults(func=cmd_checkpoint_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SluiceError, OSError) as exc:
        print(f"sluice: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except ValueError as exc:  # malformed argument values, e.g. a source string
        print(f"sluice: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
