"""Drivers: one shard of the pipeline, in-process or as a separate OS process."""
from __future__ import annotations

import importlib
import math
import multiprocessing as mp
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .. import errors
from ..errors import PipelineStalled, RuntimeFailure
from ..remote.connection import link_for
from .cachefiles import CacheDir, CacheReader, CacheWriter
from .execute import Bundle
from .stages import (
    FLUSH, Dispatch, Inbox, Prefetch, Zip, batch_stage, cache_stage, inline_stage, source_stage,
)
from .variants import BASE_VARIANT, VariantDescriptor

_POLL = 0.05


@dataclass
class DriverSpec:
    """Everything a driver needs to build its chain (picklable)."""

    index: int
    n_drivers: int
    graph: object  # physical LogicalGraph with bindings
    assignment: dict  # pipe id -> VariantDescriptor
    dispatch_ids: frozenset
    config: object
    epoch: int
    endpoints: dict  # variant kind -> endpoint for pools without one (local workers)
    links: dict  # (kind, endpoint) -> (bandwidth, overhead_us)
    skip: dict = field(default_factory=dict)  # source index -> skip plan
    cache: Optional[tuple] = None  # (root, signature, write)
    sites: tuple = ()  # prefetch node ids, for occupancy reporting

    def splits(self, binding) -> list:
        return [s for s in range(binding.n_splits) if s % self.n_drivers == self.index]


class DriverContext:
    def __init__(self, spec: DriverSpec, occupancy=None):
        self.spec = spec
        self.config = spec.config
        self.epoch = spec.epoch
        self.stop = threading.Event()
        self.progress = time.monotonic()
        self._occupancy = occupancy
        self.cache_writer = None
        self._cache_reader = None
        if spec.cache is not None:
            root, sig, write = spec.cache
            cdir = CacheDir(root, sig)
            split = min(b.split_size for _, b in spec.graph.bindings)
            self._cache_reader = CacheReader(cdir, split, spec.config.disk_bandwidth)
            if write:
                self.cache_writer = CacheWriter(cdir)

    def bundle(self, node, variant_key: str) -> Bundle:
        return Bundle.for_node(node, self.config.seed, self.epoch, variant_key)

    def endpoint_for(self, variant: VariantDescriptor) -> str:
        return variant.endpoint or self.spec.endpoints[variant.kind]

    def link_for(self, variant: VariantDescriptor):
        bw, overhead = self.spec.links.get(variant.family(), (None, 0.0))
        if not bw and not overhead:
            return None
        return link_for(self.endpoint_for(variant), bw, overhead)

    def cache_read(self, src: int, seq: int):
        return self._cache_reader.get(src, seq) if self._cache_reader is not None else None

    def occupancy_changed(self, site, n: int) -> None:
        if self._occupancy is not None:
            self._occupancy(site, n)


class LocalDriver:
    """One driver whose stages run as threads of the calling process."""

    def __init__(self, spec: DriverSpec, occupancy=None):
        self.spec = spec
        self.ctx = DriverContext(spec, occupancy)
        self.inboxes: list = []
        self.prefetch: dict = {}
        self.dispatch: dict = {}
        self._threaded: list = []
        g = spec.graph
        self._src_index = {nid: i for i, nid in enumerate(sorted(g.source_ids))}
        self._bindings = dict(g.bindings)
        try:
            self._iter = iter(self._build(g.output_id))
            for st in self._threaded:
                st.start()
        except BaseException:
            self.stop()
            raise

    def _build(self, nid):
        g, ctx = self.spec.graph, self.ctx
        node = g.node(nid)
        preds = sorted(g.preds.get(nid, ()))
        kind = node.kind
        if kind == "source":
            idx = self._src_index[nid]
            binding = self._bindings[nid]
            inbox = Inbox()
            self.inboxes.append((idx, inbox))
            return source_stage(ctx, idx, node, binding, self.spec.splits(binding), inbox,
                                self.spec.skip.get(idx))
        if kind == "zip":
            st = Zip(node, [self._build(p) for p in preds], ctx)
            self._threaded.append(st)
            return st
        up = self._build(preds[0])
        if kind == "prefetch":
            cap = int(node.spec.param_dict.get("capacity", ctx.config.prefetch_capacity))
            st = Prefetch(node, up, ctx, cap)
            self.prefetch[nid] = st
            self._threaded.append(st)
            return st
        if kind == "batch":
            return batch_stage(node, up, ctx)
        if kind == "cache":
            return cache_stage(node, up, ctx)
        if nid in self.spec.dispatch_ids:
            st = Dispatch(node, up, ctx, self.spec.assignment.get(nid, BASE_VARIANT))
            self.dispatch[nid] = st
            self._threaded.append(st)
            return st
        return inline_stage(node, up, ctx)

    def __iter__(self):
        return self._iter

    def reemit(self, requests) -> None:
        by_src: dict = {}
        for src, seq, parts in requests:
            by_src.setdefault(src, []).append((src, seq, parts))
        for idx, inbox in self.inboxes:
            if idx in by_src:
                inbox.reemit(by_src[idx])

    def mutate(self, pid: int, variant) -> None:
        self.dispatch[pid].mutate(variant)

    def occupancy(self, site) -> tuple:
        return self.prefetch[site].occupancy()

    def stop(self) -> None:
        self.ctx.stop.set()
        for _, inbox in self.inboxes:
            inbox.stop()
        for st in self.dispatch.values():
            st.close()
        if self.ctx.cache_writer is not None:
            self.ctx.cache_writer.close()
        for st in self._threaded:
            for t in getattr(st, "threads", [getattr(st, "thread", None)]):
                if t is not None and t.is_alive() and t is not threading.current_thread():
                    t.join(timeout=2.0)


# process drivers -------------------------------------------------------------

def _import_plugins(modules) -> None:
    for m in modules:
        importlib.import_module(m)


def _encode_error(exc: BaseException) -> tuple:
    return type(exc).__name__, str(exc)


def decode_error(name: str, message: str) -> BaseException:
    cls = getattr(errors, name, None)
    if isinstance(cls, type) and issubclass(cls, BaseException):
        try:
            return cls(message)
        except TypeError:
            pass
    return RuntimeFailure(f"{name}: {message}")


def _driver_main(spec: DriverSpec, out_q, ctl_q, reply_q, occ) -> None:
    _import_plugins(spec.config.plugins)
    sites = {s: i for i, s in enumerate(spec.sites)}

    def occupancy(site, n):
        i = sites.get(site)
        if i is not None:
            occ[i] = n

    try:
        driver = LocalDriver(spec, occupancy)
    except BaseException as exc:
        out_q.put(("crash", spec.index) + _encode_error(exc))
        out_q.put(("done", spec.index))
        return
    stop = driver.ctx.stop

    def control():
        while True:
            try:
                msg = ctl_q.get(timeout=0.2)
            except queue.Empty:
                if stop.is_set():
                    return
                continue
            op = msg[0]
            if op == "stop":
                driver.stop()
                return
            if op == "reemit":
                driver.reemit(msg[1])
            elif op == "mutate":
                token, pid, key = msg[1:]
                try:
                    driver.mutate(pid, VariantDescriptor.parse(key))
                    reply_q.put((token, spec.index, None))
                except BaseException as exc:
                    reply_q.put((token, spec.index, _encode_error(exc)))

    listener = threading.Thread(target=control, daemon=True)
    listener.start()
    try:
        for item in driver:
            if item is FLUSH:
                continue
            while True:
                try:
                    out_q.put(("item", spec.index, item), timeout=_POLL)
                    break
                except queue.Full:
                    if stop.is_set():
                        break
            if stop.is_set():
                break
    except BaseException as exc:
        if not stop.is_set():
            out_q.put(("crash", spec.index) + _encode_error(exc))
    listener.join()
    driver.stop()
    out_q.cancel_join_thread()


_MP = None


def _context():
    global _MP
    if _MP is None:
        _MP = mp.get_context("forkserver")
        _MP.set_forkserver_preload(["sluice.runtime.driver"])
    return _MP


class ProcessDrivers:
    """``n`` driver processes feeding one bounded output queue."""

    def __init__(self, specs: list, capacity: int):
        ctx = _context()
        self.capacity = capacity
        self.out_q = ctx.Queue(capacity)
        self.reply_q = ctx.Queue()
        self.ctl = [ctx.Queue() for _ in specs]
        self.sites = specs[0].sites
        self.occ = [ctx.Array("l", max(1, len(self.sites)), lock=False) for _ in specs]
        self.procs = [ctx.Process(target=_driver_main, args=(s, self.out_q, c, self.reply_q, o), daemon=True)
                      for s, c, o in zip(specs, self.ctl, self.occ)]
        for p in self.procs:
            p.start()
        self.stall_timeout = specs[0].config.stall_timeout
        self._token = 0
        self._last = time.monotonic()

    def next_item(self):
        while True:
            try:
                msg = self.out_q.get(timeout=0.2)
            except queue.Empty:
                if time.monotonic() - self._last > self.stall_timeout:
                    raise PipelineStalled(f"no output for {self.stall_timeout}s")
                dead = [i for i, p in enumerate(self.procs) if not p.is_alive()]
                if dead:
                    raise RuntimeFailure(f"driver process {dead[0]} exited unexpectedly")
                continue
            self._last = time.monotonic()
            if msg[0] == "item":
                return msg[2]
            if msg[0] == "crash":
                raise decode_error(msg[2], msg[3])

    def reemit(self, k: int, requests) -> None:
        self.ctl[k].put(("reemit", list(requests)))

    def mutate(self, pid, variant, timeout: float) -> None:
        self._token += 1
        token = self._token
        for c in self.ctl:
            c.put(("mutate", token, pid, variant.key()))
        deadline = time.monotonic() + timeout
        pending = set(range(len(self.procs)))
        failure = None
        while pending:
            left = deadline - time.monotonic()
            if left <= 0:
                raise errors.DrainTimeout(f"drivers {sorted(pending)} did not apply the change")
            try:
                tok, idx, err = self.reply_q.get(timeout=min(left, 0.2))
            except queue.Empty:
                continue
            if tok != token:
                continue
            pending.discard(idx)
            if err is not None and failure is None:
                failure = decode_error(*err)
        if failure is not None:
            raise failure

    def occupancy(self, site) -> tuple:
        i = self.sites.index(site)
        return sum(o[i] for o in self.occ), None

    def output_occupancy(self) -> tuple:
        try:
            n = self.out_q.qsize()
        except NotImplementedError:
            n = 0
        return min(n, self.capacity), self.capacity

    def stop(self) -> None:
        for c in self.ctl:
            c.put(("stop",))
        deadline = time.monotonic() + 5.0
        while any(p.is_alive() for p in self.procs) and time.monotonic() < deadline:
            try:
                self.out_q.get(timeout=0.05)
            except queue.Empty:
                pass
        for p in self.procs:
            if p.is_alive():
                p.terminate()
            p.join(timeout=1.0)
        for q in [self.out_q, self.reply_q] + self.ctl:
            q.close()
            q.cancel_join_thread()


class ThreadDrivers:
    """Adapter giving a single in-process driver the ProcessDrivers interface."""

    def __init__(self, spec: DriverSpec):
        self.driver = LocalDriver(spec)
        self._it = iter(self.driver)

    @property
    def ctx(self):
        return self.driver.ctx

    def next_item(self):
        while True:
            item = next(self._it, None)
            if item is not FLUSH:
                return item

    def reemit(self, k: int, requests) -> None:
        self.driver.reemit(requests)

    def mutate(self, pid, variant, timeout: float) -> None:
        self.driver.mutate(pid, variant)

    def occupancy(self, site) -> tuple:
        return self.driver.occupancy(site)

    def output_occupancy(self) -> Optional[tuple]:
        out = self.driver.spec.graph.output_id
        if out in self.driver.prefetch:
            return self.driver.prefetch[out].occupancy()
        return None

    def stop(self) -> None:
        self.driver.stop()


def no_stall(config):
    return config.replace(stall_timeout=math.inf)
