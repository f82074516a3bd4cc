"""DataSet: a graph bound to sources and backends, iterated as batches.

Optimization interface (static, between epochs): ``register``, ``fuse``,
``update_dfg``, ``assign``, ``set_shards``. Execution interface (may run
mid-epoch): ``shard``, ``mutate``, ``scale``.
"""
from __future__ import annotations

import shutil
import tempfile
import threading
from dataclasses import dataclass, replace
from typing import Optional

from ..errors import (
    CorruptCheckpoint, DuplicateId, EpochInProgress, GroupNotContiguous, InvalidShardCount,
    ResourceExhausted, RuntimeFailure, SingletonFusion, UnknownPipeId, UnknownSite, UnsupportedVariant,
    ValidationFailed, VariantMismatch, BackendUnavailable,
)
from ..graph.constraints import Violation, validate
from ..graph.model import LogicalGraph, PipeNode, TransformSpec, fused_node, replace_with_fused, splice_after
from ..reliability import Checkpoint, SplitLedger
from ..telemetry import MetadataStore
from .cachefiles import CacheDir, signature
from .client import Batch, EpochRun
from .config import RuntimeConfig
from .driver import DriverSpec, ProcessDrivers, ThreadDrivers, no_stall
from .variants import BASE_VARIANT, CACHE_READ, LOCAL_POOL, REMOTE_POOL, Backend, VariantDescriptor

__all__ = ["Batch", "DataSet", "DriverHandle", "RuntimeConfig", "apply_plan"]


@dataclass(frozen=True)
class DriverHandle:
    index: int
    splits: dict  # source index -> tuple of split ids


class DataSet:
    def __init__(self, graph: LogicalGraph, backends=(), config: Optional[RuntimeConfig] = None,
                 store: Optional[MetadataStore] = None):
        violations = validate(graph)
        violations += [Violation("Unbound", s, "source has no dataset bound")
                       for s in graph.source_ids if graph.binding(s) is None]
        if violations:
            raise ValidationFailed(violations)
        self.graph = graph
        self.backends = tuple(backends)
        self.config = config or RuntimeConfig()
        self.store = store if store is not None else MetadataStore()
        self.store.register_graph(graph)
        self.assignment: dict = {}
        self.dispatch_ids: set = set()
        self.registered: dict = {}
        self.shards = self.config.shards
        self.epoch = 0
        self._run: Optional[EpochRun] = None
        self._resume: Optional[Checkpoint] = None
        self._local: dict = {}
        self._tmp = None
        self.last_throughput = 0.0
        self.cache_events: list = []
        self._control = threading.RLock()  # serializes dynamic changes and epoch setup

    # helpers ---------------------------------------------------------------
    def _known(self, pid: int) -> PipeNode:
        if pid in self.graph.by_id:
            return self.graph.node(pid)
        if pid in self.registered:
            return self.registered[pid]
        raise UnknownPipeId(pid)

    def _next_id(self) -> int:
        return max(list(self.graph.by_id) + list(self.registered)) + 1

    def _backend_for(self, v: VariantDescriptor) -> Backend:
        for b in self.backends:
            if b.variant().family() == v.family():
                return b
        raise UnsupportedVariant(f"no enabled backend offers {v.key()}")

    def _check_variant(self, node: PipeNode, v) -> VariantDescriptor:
        if isinstance(v, str):
            v = VariantDescriptor.parse(v)
        if v.is_base:
            return v
        if v.kind == CACHE_READ:
            raise UnsupportedVariant("cache_read is chosen by placing a cache pipe, not by assign")
        if not node.offloadable:
            raise UnsupportedVariant(f"pipe {node.id} ({node.name}) cannot run off the driver")
        self._backend_for(v)
        if v.parallelism < 1:
            raise UnsupportedVariant("pooled variants need parallelism >= 1")
        return v

    @property
    def running(self) -> bool:
        return self._run is not None and not self._run.finished

    def _static(self):
        if self.running:
            raise EpochInProgress("the dataflow can only change between epochs")

    def variant(self, pid: int) -> VariantDescriptor:
        return self.assignment.get(pid, BASE_VARIANT)

    # optimization interface ----------------------------------------------------
    def register(self, pipe: PipeNode) -> None:
        if pipe.id in self.graph.by_id or pipe.id in self.registered:
            raise DuplicateId(f"pipe id {pipe.id} is already in use")
        self.registered[pipe.id] = pipe
        self.store.register(pipe.id)

    def fuse(self, pipes, node_id: Optional[int] = None) -> PipeNode:
        ids = [p.id if isinstance(p, PipeNode) else int(p) for p in pipes]
        if len(ids) < 2:
            raise SingletonFusion("fusing one pipe is an assign, not a fusion")
        g = self.graph
        for i in ids:
            self._known(i)
        for a, b in zip(ids, ids[1:]):
            if g.succs.get(a) != [b] or g.preds.get(b) != [a]:
                raise GroupNotContiguous(f"pipes {a} and {b} are not adjacent")
        nodes = [g.node(i) for i in ids]
        if len({n.offloadable and n.fusable for n in nodes}) > 1 or \
                len({self.variant(i).family() for i in ids}) > 1:
            raise VariantMismatch(f"pipes {ids} do not support the same variants")
        self._static()
        node = fused_node(g, ids, node_id if node_id is not None else self._next_id())
        self.register(node)
        self.graph = replace_with_fused(g, node)
        self.store.register_graph(self.graph)
        v = self.variant(ids[0])
        for q in ids:
            self.assignment.pop(q, None)
        if not v.is_base:
            self.assignment[node.id] = v
            self.dispatch_ids.add(node.id)
        return node

    def update_dfg(self, graph: LogicalGraph) -> None:
        self._static()
        if not graph.bindings:
            graph = replace(graph, bindings=self.graph.bindings)
        violations = validate(graph)
        if violations:
            raise ValidationFailed(violations)
        self.graph = graph
        self.store.register_graph(graph)

    def assign(self, pid: int, variant) -> None:
        v = self._check_variant(self._known(pid), variant)
        if v.is_base:
            self.assignment.pop(pid, None)
        else:
            self.assignment[pid] = v
            self.dispatch_ids.add(pid)

    def set_shards(self, n: int) -> None:
        if not isinstance(n, int) or n < 1:
            raise InvalidShardCount(f"shard count must be >= 1, got {n!r}")
        self.shards = n

    # execution interface ---------------------------------------------------------
    def _sources(self) -> dict:
        return {i: self.graph.binding(s) for i, s in enumerate(sorted(self.graph.source_ids))}

    def shard(self, n: int) -> list:
        """Partition splits round-robin over ``n`` drivers (used from the next epoch)."""
        self.set_shards(n)
        out = []
        for k in range(n):
            splits = {i: tuple(s for s in range(b.n_splits) if s % n == k) for i, b in self._sources().items()}
            out.append(DriverHandle(k, splits))
        return out

    def _check_capacity(self, assignment: dict, shards: int) -> None:
        for b in self.backends:
            fam = b.variant().family()
            used = sum(max(1, v.parallelism) for v in assignment.values() if v.family() == fam)
            cap = b.effective_cap if b.kind == LOCAL_POOL else b.cap
            if cap and used * shards > cap:
                raise ResourceExhausted(
                    f"{used * shards} executors requested on {b.kind} but the backend allows {cap}")

    def mutate(self, pid: int, variant) -> None:
        with self._control:
            self._mutate(pid, variant)

    def _mutate(self, pid: int, variant) -> None:
        node = self._known(pid)
        v = self._check_variant(node, variant)
        if v == self.variant(pid):
            return
        trial = dict(self.assignment)
        if v.is_base:
            trial.pop(pid, None)
        else:
            trial[pid] = v
        self._check_capacity(trial, self.shards)
        run = self._run
        if run is not None and not run.finished and pid in self._run_dispatch:
            try:
                run.drivers.mutate(pid, v, self.config.drain_timeout)
            except (RuntimeFailure, OSError):
                if not run.finished:  # an epoch ending underneath is fine; the change applies next epoch
                    raise
        self.assignment = trial
        if not v.is_base:
            self.dispatch_ids.add(pid)

    def scale(self, pid: int, n: int) -> None:
        v = self.variant(self._known(pid).id)
        if not v.pooled:
            raise UnsupportedVariant(f"pipe {pid} runs on the base variant and has no parallelism")
        if n < 0:
            raise UnsupportedVariant("parallelism must be >= 0")
        with self._control:
            v = self.variant(pid)
            self._mutate(pid, BASE_VARIANT if n == 0 else v.with_parallelism(n))

    def parallelism(self, pid: int) -> int:
        return self.variant(pid).parallelism

    # backends ---------------------------------------------------------------------
    def _endpoints(self) -> dict:
        out = {}
        for b in self.backends:
            if b.kind == LOCAL_POOL:
                out[LOCAL_POOL] = self._local_worker(b).endpoint
        return out

    def _local_worker(self, b: Backend):
        from ..remote.worker import WorkerProcess

        w = self._local.get(b)
        if w is None or not w.alive():
            path = f"unix:{self._tmpdir()}/local-{len(self._local)}.sock"
            w = self._local[b] = WorkerProcess(path, b.effective_cap, imports=self.config.plugins)
        return w

    def _tmpdir(self) -> str:
        if self._tmp is None:
            self._tmp = tempfile.mkdtemp(prefix="sluice-")
        return self._tmp

    def validate_backends(self) -> None:
        """Raise BackendUnavailable unless every remote backend answers HELLO."""
        from ..errors import ConnectionLost
        from ..remote.connection import Connection

        for b in self.backends:
            if b.kind != REMOTE_POOL:
                continue
            try:
                Connection(b.endpoint, None, heartbeat_interval=60, heartbeat_timeout=120).close()
            except (ConnectionLost, OSError, ResourceExhausted) as exc:
                if isinstance(exc, ResourceExhausted):
                    continue
                raise BackendUnavailable(f"remote backend {b.endpoint} is unreachable: {exc}") from exc

    def insert_default_prefetch(self) -> None:
        """A prefetch buffer after every offloaded pipe and at the output, where missing."""
        self._static()
        g = self.graph
        sites = [p for p in self.assignment if p in g.by_id] + [g.output_id]
        for site in dict.fromkeys(sites):
            succ = g.succs.get(site, [])
            if (succ and g.node(succ[0]).kind == "prefetch") or g.node(site).kind == "prefetch":
                continue
            nid = max(list(g.by_id) + list(self.registered)) + 1
            node = PipeNode(nid, TransformSpec("prefetch", (("capacity", self.config.prefetch_capacity),),
                                               "prefetch"), fixed=True)
            self.register(node)
            g = splice_after(g, site, node)
        self.update_dfg(g)

    # epochs -------------------------------------------------------------------
    def _cache_node(self) -> Optional[int]:
        ids = [n.id for n in self.graph.nodes if n.kind == "cache"]
        return ids[0] if ids else None

    def _cache_dir(self) -> Optional[CacheDir]:
        cid = self._cache_node()
        if cid is None:
            return None
        return CacheDir(self.config.cache_dir or self._tmpdir(), signature(self.graph, cid))

    def cache_ready(self) -> bool:
        """True when the next epoch reads the cache instead of filling it."""
        cdir = self._cache_dir()
        return cdir is not None and cdir.complete(self._sources())

    def start_epoch(self) -> None:
        with self._control:
            self._start_epoch()

    def _start_epoch(self) -> None:
        if self.running:
            raise EpochInProgress("finish or abort the current epoch first")
        g = self.graph
        violations = validate(g, registered=list(g.by_id) + list(self.registered))
        if violations:
            raise ValidationFailed(violations)
        sources = self._sources()
        split_sizes = {b.split_size for b in sources.values()}
        if len(split_sizes) != 1:
            raise ValidationFailed([Violation("SplitSize", None, "sources must share one split size")])
        split_size = split_sizes.pop()
        sizes = {i: len(b) for i, b in sources.items()}
        assignment = {p: v for p, v in self.assignment.items() if p in g.by_id}
        self._check_capacity(assignment, self.shards)

        resume = self._resume
        self._resume = None
        if resume is not None:
            if resume.split_size != split_size:
                raise CorruptCheckpoint("checkpoint split size does not match the sources")
            ledger = SplitLedger.restore(resume, sizes)
            before = SplitLedger.restore(resume, sizes)
            done_before = before.delivered
            skip = {i: ledger.skip_plan(i) for i in sizes}
        else:
            ledger = SplitLedger(sizes, split_size, self.epoch, self.config.seed)
            done_before, skip = None, {}

        cdir = self._cache_dir()
        cache = None
        if cdir is not None:
            if resume is not None:
                cdir.invalidate_partial()
            cache = (str(cdir.path.parent), cdir.path.name, not cdir.complete(sources))
        self._run_dispatch = {p for p in self.dispatch_ids if p in g.by_id and g.node(p).offloadable}
        sites = tuple(n.id for n in g.nodes if n.kind == "prefetch")
        n = self.shards
        config = self.config.replace(seed=ledger.seed)
        base = DriverSpec(0, n, g, assignment, frozenset(self._run_dispatch), config, ledger.epoch,
                          self._endpoints() if assignment else {},
                          {b.variant().family(): (b.link_bandwidth, b.rpc_overhead_us) for b in self.backends},
                          skip, cache, sites)
        if n == 1:
            drivers = ThreadDrivers(base)
        else:
            specs = [replace(base, index=k, config=no_stall(config)) for k in range(n)]
            drivers = ProcessDrivers(specs, self.config.prefetch_capacity)
        self._run = EpochRun(drivers, ledger, self.store, config, split_size=split_size, n_drivers=n,
                             graph_batches=any(nd.kind == "batch" for nd in g.nodes),
                             done_before=done_before, on_finish=self._epoch_done)

    def _epoch_done(self, run: EpochRun) -> None:
        self.last_throughput = run.throughput()
        cdir = self._cache_dir()
        if cdir is not None:
            self.cache_events.append((run.ledger.epoch, cdir.finalize(self._sources())))
        self.epoch = run.ledger.epoch + 1

    def next_batch(self) -> Optional[Batch]:
        """The next batch of the open epoch (opening one if needed); None marks its end."""
        if self._run is None:
            self.start_epoch()
        b = self._run.next_batch()
        if b is None:
            self._run = None
        return b

    def __iter__(self):
        """Batches of one full epoch."""
        if not self.running:
            self.start_epoch()
        run = self._run
        while True:
            b = run.next_batch()
            if b is None:
                if self._run is run:
                    self._run = None
                return
            yield b

    def abort_epoch(self) -> None:
        if self._run is not None:
            self._run.abort()
            self._run = None

    def measure_throughput(self) -> float:
        """Run one epoch as fast as possible; samples/s between first and last delivery."""
        for _ in self:
            pass
        return self.last_throughput

    # observation ------------------------------------------------------------------
    def buffer_occupancy(self, site) -> tuple:
        g = self.graph
        if site == "output":
            if self.running:
                occ = self._run.drivers.output_occupancy()
                if occ is not None:
                    return occ
            if self.shards > 1:
                return 0, self.config.prefetch_capacity
            out = g.node(g.output_id)
            if out.kind != "prefetch":
                return 0, 0
            site = out.id
        if site not in g.by_id or g.node(site).kind != "prefetch":
            raise UnknownSite(f"no prefetch buffer at {site!r}")
        cap = int(g.node(site).spec.param_dict.get("capacity", self.config.prefetch_capacity))
        if not self.running:
            return 0, cap
        n, _ = self._run.drivers.occupancy(site)
        return min(n, cap * self.shards), cap * self.shards

    def prefetch_site_for(self, pid: int) -> Optional[int]:
        """The prefetch node fed by ``pid`` (or by the fused pipe containing it)."""
        g = self.graph
        carriers = {pid} | {n.id for n in g.nodes if n.kind == "fused" and pid in n.member_ids}
        for n in g.nodes:
            if n.kind == "prefetch" and set(g.preds.get(n.id, ())) & carriers:
                return n.id
        return None

    # checkpoints ----------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        if self._run is not None and not self._run.finished:
            return self._run.ledger.checkpoint()
        if self._resume is not None:
            return self._resume
        sizes = {i: len(b) for i, b in self._sources().items()}
        split = min(b.split_size for b in self._sources().values())
        return SplitLedger(sizes, split, self.epoch, self.config.seed).checkpoint()

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from ``ckpt`` at the next ``start_epoch``; an open epoch is abandoned."""
        sizes = {i: len(b) for i, b in self._sources().items()}
        SplitLedger.restore(ckpt, sizes)  # validates shape
        self.abort_epoch()
        self._resume = ckpt
        self.epoch = ckpt.epoch
        self.config = self.config.replace(seed=ckpt.seed)

    # lifecycle ------------------------------------------------------------------
    def close(self) -> None:
        self.abort_epoch()
        for w in self._local.values():
            w.stop()
        self._local.clear()
        if self._tmp is not None:
            shutil.rmtree(self._tmp, ignore_errors=True)
            self._tmp = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def apply_plan(ds: DataSet, plan) -> DataSet:
    """Materialize ``plan`` through the optimization interface, pass by pass."""
    ids = plan.new_ids()
    ds.update_dfg(replace(plan.graph, bindings=ds.graph.bindings))
    physical, _ = plan.physical(ds.config.prefetch_capacity)
    if plan.cache_site is not None:
        ds.register(physical.node(ids["cache"]))
    for fid, group in zip(ids["fused"], plan.fusion_groups):
        for q in group:
            ds.assign(q, plan.variant(q))
        ds.fuse(list(group), node_id=fid)
    grouped = {q for group in plan.fusion_groups for q in group}
    for pid, v in plan.assignment:
        if pid not in grouped:
            ds.assign(pid, v)
    for pid in ids["prefetch"]:
        ds.register(physical.node(pid))
    ds.set_shards(plan.shards)
    ds.update_dfg(replace(physical, bindings=ds.graph.bindings))
    return ds
