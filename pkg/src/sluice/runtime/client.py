"""The consumer side of an epoch: dedup, re-emit, ordering and batching."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from ..errors import PipelineStalled, TransformFailed
from ..graph.sample import DataSample, Member
from ..reliability import DUPLICATE, FRESH, MIXED, OrderGate
from .stages import Failure


@dataclass
class Batch:
    samples: list
    dropped: int = 0  # tombstones (filtered samples) delivered with this batch
    ids: list = field(default_factory=list)  # every identity unit, tombstones included

    def __len__(self):
        return len(self.samples)

    @property
    def payloads(self) -> list:
        return [s.payload for s in self.samples]


class EpochRun:
    """Pulls items from the drivers until the ledger reports every id delivered.

    Transform failures are re-emitted up to ``retry_limit`` times per unit;
    lost connections and mixed aggregates have their own, larger budget.
    """

    def __init__(self, drivers, ledger, store, config, *, split_size: int, n_drivers: int,
                 graph_batches: bool, done_before=None, on_finish=None):
        self.drivers = drivers
        self.ledger = ledger
        self.store = store
        self.config = config
        self.split_size = split_size
        self.n_drivers = n_drivers
        self.graph_batches = graph_batches
        self.on_finish = on_finish
        self.retries: dict = {}
        self.infra: dict = {}
        self.ready: list = []
        self.finished = False
        self.delivered = 0
        self.first_at = None
        self.last_at = None
        self.gate = None
        if config.strict_order:
            cap = config.order_capacity or 4 * split_size
            done = done_before or (lambda sid: False)
            self.gate = OrderGate(cap, lambda s, q: done((s, q)))
        if ledger.complete():
            self._finish()

    # item handling ---------------------------------------------------------
    def _owner(self, seq: int) -> int:
        return (seq // self.split_size) % self.n_drivers

    def _request(self, reqs: dict) -> None:
        by_driver: dict = {}
        for (src, seq), parts in reqs.items():
            by_driver.setdefault(self._owner(seq), []).append(
                (src, seq, None if parts is None else tuple(sorted(parts))))
        for k, r in by_driver.items():
            self.drivers.reemit(k, r)

    def _parts_owed(self, sid, part):
        owed = self.ledger.missing_parts(sid)
        if owed is not None:
            return set(owed)
        if part is not None:
            return set(range(part[1]))
        return None

    def _reemit_units(self, units, failure=None) -> None:
        reqs: dict = {}
        for m in units:
            sid = m.sample_id
            if self.ledger.seen(sid, m.part):
                continue
            key = (sid, m.part)
            if failure is not None and not failure.infra:
                n = self.retries[key] = self.retries.get(key, 0) + 1
                if n > self.config.retry_limit:
                    raise TransformFailed(failure.pipe_id, sid, failure.cause)
            else:
                n = self.infra[key] = self.infra.get(key, 0) + 1
                if n > self.config.infra_retry_limit:
                    why = failure.cause if failure is not None else "aggregate kept mixing delivered ids"
                    raise TransformFailed(failure.pipe_id if failure else None, sid,
                                          f"gave up after {n - 1} re-emits: {why}")
            owed = self._parts_owed(sid, m.part)
            if sid in reqs:
                prev = reqs[sid]
                reqs[sid] = None if prev is None or owed is None else prev | owed
            else:
                reqs[sid] = owed
        if reqs:
            self._request(reqs)

    def _handle(self, item) -> None:
        if isinstance(item, Failure):
            self._reemit_units(item.units, item)
            return
        if not isinstance(item, DataSample):
            return
        verdict = self.ledger.on_received(item)
        if verdict == FRESH:
            now = time.monotonic()
            self.first_at = self.first_at or now
            self.last_at = now
            self.delivered += 1
            if item.trace is not None:
                self.store.record(item)
            self.store.note_delivery(1, now)
            self.ready.extend(self.gate.offer(item) if self.gate is not None else [item])
        elif verdict == MIXED:
            fresh = self.ledger.fresh_units(item)
            self._reemit_units([Member(sid, part) for sid, part in fresh])
        else:
            assert verdict == DUPLICATE

    def _pull(self) -> bool:
        """Handle one item; False once the epoch is complete."""
        if self.finished:
            return False
        if self.ledger.complete():
            self._finish()
            return False
        item = self.drivers.next_item()
        if item is None:
            raise PipelineStalled("drivers ended before every sample was delivered")
        ctx = getattr(self.drivers, "ctx", None)
        if ctx is not None:
            ctx.progress = time.monotonic()
        self._handle(item)
        return True

    def _finish(self) -> None:
        if self.finished:
            return
        self.finished = True
        self.drivers.stop()
        if self.on_finish is not None:
            self.on_finish(self)

    def abort(self) -> None:
        if not self.finished:
            self.finished = True
            self.drivers.stop()

    # batches -----------------------------------------------------------------
    def next_batch(self):
        """The next Batch, or None once the epoch is over."""
        want = 1 if self.graph_batches else self.config.batch_size
        samples, dropped, ids = [], 0, []
        try:
            while True:
                while self.ready and len(samples) < want:
                    s = self.ready.pop(0)
                    ids.extend(m.sample_id for m in s.identity())
                    if s.tombstone:
                        dropped += 1
                    else:
                        samples.append(s)
                if len(samples) >= want:
                    return Batch(samples, dropped, ids)
                if not self._pull():
                    if self.ready:
                        continue
                    return Batch(samples, dropped, ids) if samples or dropped else None
        except BaseException:
            self.abort()
            raise

    def throughput(self) -> float:
        if self.delivered < 2 or not self.last_at or self.last_at <= self.first_at:
            return 0.0
        return (self.delivered - 1) / (self.last_at - self.first_at)
