"""Per-driver execution stages.

A driver is a chain of iterators over stream items. Besides DataSamples the
stream carries ``Failure`` records (an input a pipe could not process),
``Cached`` wrappers (samples read back from the cache, which skip every pipe
above the cache node) and the ``FLUSH`` punctuation a source emits after each
burst of samples. Stages that hold work back (pooled dispatch, batching)
drain it when FLUSH passes.
"""
from __future__ import annotations

import queue
import struct
import threading
import time
from dataclasses import dataclass, replace
from typing import Optional

from ..errors import UnsupportedVariant
from ..graph.sample import DataSample
from ..telemetry import TraceMarker, TraceRecord
from .execute import NEEDED_PARTS, StepError, run_bundle
from .pool import Pool

_POLL = 0.05


class _Flush:
    def __repr__(self):
        return "FLUSH"


FLUSH = _Flush()
_END = object()


@dataclass
class Failure:
    units: tuple  # identity Members of the input that failed
    pipe_id: int
    cause: str
    infra: bool = False  # lost connection rather than a transform error


@dataclass
class Cached:
    sample: DataSample


@dataclass
class Crash:
    error: BaseException


def put_until(q: queue.Queue, item, stop: threading.Event) -> bool:
    while True:
        try:
            q.put(item, timeout=_POLL)
            return True
        except queue.Full:
            if stop.is_set():
                return False


def get_until(q: queue.Queue, stop: threading.Event):
    while True:
        try:
            return q.get(timeout=_POLL)
        except queue.Empty:
            if stop.is_set():
                return _END


# sources --------------------------------------------------------------------

class Inbox:
    """Re-emit requests for one driver's sources."""

    STOP = ("stop",)

    def __init__(self):
        self.q = queue.Queue()

    def reemit(self, requests) -> None:
        self.q.put(list(requests))

    def stop(self) -> None:
        self.q.put(self.STOP)


def source_stage(ctx, src_index: int, node, binding, splits, inbox: Inbox, skip=None):
    """Samples of ``splits`` in sequence order, then re-emits on request.

    ``skip`` is ``(sealed splits, delivered seqs, {seq: parts still owed})``
    from a restored checkpoint.
    """
    sealed, done, partial = skip or (frozenset(), frozenset(), {})
    marker = TraceMarker(ctx.config.trace_period) if ctx.config.trace_period else None

    def make(seq, parts=None):
        t0 = time.perf_counter_ns()
        cached = ctx.cache_read(src_index, seq)
        if cached is not None:
            s = replace(cached, meta=dict(cached.meta), trace=None)
        else:
            payload = binding.read(seq)
            s = DataSample((src_index, seq), seq // binding.split_size, payload)
        if parts is not None:
            s.meta[NEEDED_PARTS] = ",".join(str(i) for i in sorted(parts))
        if marker is not None and marker.wants(seq) and cached is None:
            s.trace = [TraceRecord(node.id, time.perf_counter_ns() - t0, 0, len(s.payload))]
        elif marker is not None and marker.wants(seq):
            s.trace = []
        return Cached(s) if cached is not None else s

    for split in splits:
        if split in sealed:
            continue
        for seq in binding.split_members(split):
            if ctx.stop.is_set():
                return
            if seq in done:
                continue
            yield make(seq, partial.get(seq))
    yield FLUSH
    idle_since = time.monotonic()
    while not ctx.stop.is_set():
        try:
            req = inbox.q.get(timeout=_POLL)
        except queue.Empty:
            if time.monotonic() - max(idle_since, ctx.progress) > ctx.config.stall_timeout:
                from ..errors import PipelineStalled
                raise PipelineStalled(f"no progress for {ctx.config.stall_timeout}s")
            continue
        if req is Inbox.STOP:
            return
        for src, seq, parts in req:
            if src == src_index and 0 <= seq < len(binding):
                yield make(seq, parts)
        yield FLUSH
        idle_since = time.monotonic()


# inline execution -----------------------------------------------------------

def inline_stage(node, upstream, ctx):
    bundle = ctx.bundle(node, "base")
    for item in upstream:
        if type(item) is not DataSample:
            yield item
            continue
        try:
            outs = run_bundle(item, bundle)
        except StepError as exc:
            yield Failure(item.identity(), exc.pipe_id, exc.cause)
            continue
        yield from outs


def cache_stage(node, upstream, ctx):
    """Writes samples through to the cache in the first epoch; unwraps cache hits later."""
    writer = ctx.cache_writer
    for item in upstream:
        if type(item) is Cached:
            yield item.sample
            continue
        if writer is not None and type(item) is DataSample:
            writer.write(item)
        yield item


# batching -------------------------------------------------------------------

_U32 = struct.Struct(">I")


def pack_batch(payloads) -> bytes:
    out = [_U32.pack(len(payloads))]
    for p in payloads:
        out += [_U32.pack(len(p)), p]
    return b"".join(out)


def unpack_batch(blob: bytes) -> list:
    (n,), pos, out = _U32.unpack_from(blob), 4, []
    for _ in range(n):
        (ln,) = _U32.unpack_from(blob, pos)
        out.append(blob[pos + 4:pos + 4 + ln])
        pos += 4 + ln
    return out


def aggregate(samples, pipe_id=None) -> DataSample:
    members = tuple(m for s in samples for m in s.identity())
    traces = [r for s in samples if s.trace is not None for r in s.trace]
    traced = any(s.trace is not None for s in samples)
    first = samples[0]
    return DataSample(first.sample_id, first.split_id, pack_batch([s.payload for s in samples]),
                      trace=traces if traced else None, members=members)


def batch_stage(node, upstream, ctx):
    size = int(node.spec.param_dict.get("size", ctx.config.batch_size))
    buf = []
    for item in upstream:
        if item is FLUSH:
            if buf:
                yield aggregate(buf, node.id)
                buf = []
            yield item
        elif type(item) is not DataSample or item.tombstone:
            yield item
        else:
            buf.append(item)
            if len(buf) >= size:
                yield aggregate(buf, node.id)
                buf = []


def zip_samples(samples) -> DataSample:
    members = tuple(m for s in samples for m in s.identity())
    traces = [r for s in samples if s.trace is not None for r in s.trace]
    first = samples[0]
    meta = {}
    for s in samples:
        meta.update(s.meta)
    return DataSample(first.sample_id, first.split_id, pack_batch([s.payload for s in samples]), meta,
                      traces if any(s.trace is not None for s in samples) else None,
                      tombstone=any(s.tombstone for s in samples), members=members)


# threaded stages --------------------------------------------------------------

class Prefetch:
    """Bounded buffer filled by its own thread from the upstream stage."""

    def __init__(self, node, upstream, ctx, capacity: int):
        self.node = node
        self.capacity = capacity
        self.q = queue.Queue(capacity)
        self.ctx = ctx
        self.upstream = upstream
        self.thread = threading.Thread(target=self._pump, name=f"prefetch-{node.id}", daemon=True)

    def start(self):
        self.thread.start()
        return self

    def _pump(self):
        stop = self.ctx.stop
        try:
            for item in self.upstream:
                if not put_until(self.q, item, stop):
                    return
                self.ctx.occupancy_changed(self.node.id, self.q.qsize())
        except BaseException as exc:  # surfaced to the consumer
            put_until(self.q, Crash(exc), stop)
            return
        put_until(self.q, _END, stop)

    def occupancy(self) -> tuple:
        return min(self.q.qsize(), self.capacity), self.capacity

    def __iter__(self):
        stop = self.ctx.stop
        while True:
            item = get_until(self.q, stop)
            self.ctx.occupancy_changed(self.node.id, self.q.qsize())
            if item is _END:
                return
            if type(item) is Crash:
                raise item.error
            yield item


class Dispatch:
    """Sends each sample of a pipe (or fused group) to a worker pool.

    A feeder thread pulls upstream and submits; completions land in an output
    queue. ``held`` counts submitted samples whose outputs have not yet been
    consumed downstream, which bounds the queue at 4 x parallelism. The stage
    can be switched to another variant mid-stream (``mutate``): later samples
    use the new target while outstanding ones finish on the old pool.
    """

    OUTSTANDING_PER_WORKER = 4

    def __init__(self, node, upstream, ctx, variant):
        self.node = node
        self.upstream = upstream
        self.ctx = ctx
        self.out = queue.Queue()
        self._cv = threading.Condition()
        self.wire = 0
        self.held = 0
        self.lock = threading.Lock()
        self.variant = variant
        self.pool: Optional[Pool] = None
        self.bundle = None
        self._old_pools: list = []
        self._set_target(variant)
        self.thread = threading.Thread(target=self._feed, name=f"dispatch-{node.id}", daemon=True)

    def start(self):
        self.thread.start()
        return self

    # target management -------------------------------------------------------
    def _make_pool(self, variant):
        bundle = self.ctx.bundle(self.node, variant.key())
        endpoint = self.ctx.endpoint_for(variant)
        cfg = self.ctx.config
        return bundle, Pool(endpoint, bundle, max(1, variant.parallelism), on_result=self._done,
                            on_error=self._error, on_lost=self._lost, link=self.ctx.link_for(variant),
                            heartbeat_interval=cfg.heartbeat_interval,
                            heartbeat_timeout=cfg.heartbeat_timeout,
                            reconnect_timeout=cfg.reconnect_timeout)

    def _set_target(self, variant):
        if variant.is_base:
            self.pool, self.bundle = None, self.ctx.bundle(self.node, "base")
        else:
            self.bundle, self.pool = self._make_pool(variant)
        self.variant = variant

    def mutate(self, variant) -> None:
        with self.lock:
            if variant == self.variant:
                return
            if variant.pooled and self.variant.pooled and variant.family() == self.variant.family():
                self.pool.resize(max(1, variant.parallelism))
                self.variant = variant
                self.bundle = self.ctx.bundle(self.node, variant.key())
                return
            old = self.pool
            self._set_target(variant)
        if old is not None:
            self._old_pools.append(old)
            threading.Thread(target=self._drain_old, args=(old,), daemon=True).start()

    def _drain_old(self, pool):
        pool.wait_drained(self.ctx.config.drain_timeout)
        pool.close()

    def scale(self, n: int) -> None:
        if not self.variant.pooled:
            raise UnsupportedVariant(f"pipe {self.node.id} runs on the base variant")
        self.mutate(self.variant.with_parallelism(n))

    @property
    def limit(self) -> int:
        return self.OUTSTANDING_PER_WORKER * max(1, self.variant.parallelism)

    # callbacks -------------------------------------------------------------
    def _emit(self, items):
        with self._cv:
            self.wire -= 1
            self.held += len(items) - 1
            for it in items:
                self.out.put(it)
            self._cv.notify_all()

    def _done(self, sample, outs):
        self._emit(list(outs) or [])

    def _error(self, sample, exc):
        pipe_id, cause = self.node.id, exc.message
        if exc.code == "TransformError" and "|" in exc.message:
            head, _, cause = exc.message.partition("|")
            try:
                pipe_id = int(head)
            except ValueError:
                pass
        self._emit([Failure(sample.identity(), pipe_id, cause, infra=exc.code != "TransformError")])

    def _lost(self, sample):
        self._emit([Failure(sample.identity(), self.node.id, "connection lost", infra=True)])

    # feeder --------------------------------------------------------------------
    def _wait(self, pred):
        with self._cv:
            while not pred():
                if self.ctx.stop.is_set():
                    return False
                self._cv.wait(_POLL)
        return True

    def _feed(self):
        stop = self.ctx.stop
        try:
            for item in self.upstream:
                if stop.is_set():
                    break
                if item is FLUSH:
                    if not self._wait(lambda: self.wire == 0):
                        break
                    with self._cv:
                        self.held += 1
                    self.out.put(item)
                    continue
                if type(item) is not DataSample or item.tombstone:
                    with self._cv:
                        self.held += 1
                    self.out.put(item)
                    continue
                if not self._wait(lambda: self.held < self.limit):
                    break
                with self.lock:
                    pool, bundle = self.pool, self.bundle
                if pool is None:
                    try:
                        outs = run_bundle(item, bundle)
                    except StepError as exc:
                        outs = [Failure(item.identity(), exc.pipe_id, exc.cause)]
                    with self._cv:
                        self.held += len(outs)
                        for o in outs:
                            self.out.put(o)
                    continue
                with self._cv:
                    self.wire += 1
                    self.held += 1
                if not pool.submit(item, stop):
                    break
        except BaseException as exc:
            self.out.put(Crash(exc))
            return
        self._wait(lambda: self.wire == 0)
        self.out.put(_END)

    def __iter__(self):
        stop = self.ctx.stop
        while True:
            item = get_until(self.out, stop)
            if item is _END:
                return
            if type(item) is Crash:
                raise item.error
            with self._cv:
                self.held -= 1
                self._cv.notify_all()
            yield item

    def close(self):
        with self.lock:
            pools = [p for p in [self.pool] + self._old_pools if p is not None]
            self.pool = None
        for p in pools:
            p.close()


class Zip:
    """Pairs samples with equal sequence numbers across branches."""

    def __init__(self, node, upstreams, ctx):
        self.node = node
        self.ctx = ctx
        self.q = queue.Queue(ctx.config.prefetch_capacity * len(upstreams))
        self.n = len(upstreams)
        self.threads = [threading.Thread(target=self._pump, args=(i, up), daemon=True)
                        for i, up in enumerate(upstreams)]

    def start(self):
        for t in self.threads:
            t.start()
        return self

    def _pump(self, i, up):
        stop = self.ctx.stop
        try:
            for item in up:
                if not put_until(self.q, (i, item), stop):
                    return
        except BaseException as exc:
            put_until(self.q, (i, Crash(exc)), stop)
            return
        put_until(self.q, (i, _END), stop)

    def __iter__(self):
        waiting = [dict() for _ in range(self.n)]
        ended = 0
        stop = self.ctx.stop
        while ended < self.n:
            got = get_until(self.q, stop)
            if got is _END:
                return
            i, item = got
            if item is _END:
                ended += 1
            elif type(item) is Crash:
                raise item.error
            elif item is FLUSH or type(item) is not DataSample:
                yield item
            else:
                key = (item.sample_id[1], item.part)
                waiting[i][key] = item
                if all(key in w for w in waiting):
                    yield zip_samples([w.pop(key) for w in waiting])
