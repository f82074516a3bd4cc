"""Split-based progress tracking, exactly-once delivery and checkpoints."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    CorruptCheckpoint,
    OrderBufferOverflow,
    SealedSplit,
    UnknownSample,
    VersionMismatch,
)
from .graph.sample import DataSample

CHECKPOINT_VERSION = 1

FRESH = "fresh"
DUPLICATE = "duplicate"
MIXED = "mixed"


class _SourceLedger:
    """Progress for one source: a sealed watermark, out-of-order sealed
    splits, and per-sample state for open splits only."""

    def __init__(self, n: int, split_size: int):
        self.n = n
        self.split_size = split_size
        self.n_splits = -(-n // split_size) if n else 0
        self.sealed_below = 0
        self.sealed_extra: set = set()
        self.open: dict = {}
        self.parts: dict = {}  # seq -> (count, set of received part indexes)

    def split_len(self, split: int) -> int:
        return min(self.split_size, self.n - split * self.split_size)

    def is_sealed(self, split: int) -> bool:
        return split < self.sealed_below or split in self.sealed_extra

    def delivered(self, seq: int) -> bool:
        split = seq // self.split_size
        return self.is_sealed(split) or seq in self.open.get(split, ())

    def part_seen(self, seq: int, part) -> bool:
        if self.delivered(seq):
            return True
        if part is None:
            return False
        entry = self.parts.get(seq)
        return entry is not None and part[0] in entry[1]

    def mark(self, seq: int, part=None) -> None:
        if part is not None:
            count, got = self.parts.setdefault(seq, (part[1], set()))
            got.add(part[0])
            if len(got) < count:
                return
            del self.parts[seq]
        split = seq // self.split_size
        got = self.open.setdefault(split, set())
        got.add(seq)
        if len(got) == self.split_len(split):
            del self.open[split]
            self.sealed_extra.add(split)
            while self.sealed_below in self.sealed_extra:
                self.sealed_extra.discard(self.sealed_below)
                self.sealed_below += 1

    def complete(self) -> bool:
        return self.sealed_below >= self.n_splits

    def sealed_list(self) -> list:
        return list(range(self.sealed_below)) + sorted(self.sealed_extra)

    def tracked(self) -> int:
        return (sum(len(s) for s in self.open.values()) + len(self.sealed_extra)
                + sum(len(p[1]) for p in self.parts.values()))


@dataclass
class Checkpoint:
    """Snapshot of delivery progress: sealed splits plus ids of open splits."""

    epoch: int = 0
    seed: int = 0
    split_size: int = 1024
    sources: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "epoch": self.epoch,
            "seed": self.seed,
            "split_size": self.split_size,
            "sources": {
                str(sid): {
                    "n": s["n"],
                    "sealed": list(s["sealed"]),
                    "open": {str(k): sorted(v) for k, v in sorted(s["open"].items())},
                    "parts": {str(k): [c, sorted(p)] for k, (c, p) in sorted(s.get("parts", {}).items())},
                }
                for sid, s in sorted(self.sources.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if not isinstance(d, dict) or "version" not in d:
            raise CorruptCheckpoint("missing version field")
        if d["version"] != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {d['version']} != {CHECKPOINT_VERSION}")
        try:
            sources = {}
            for sid, s in d["sources"].items():
                sources[int(sid)] = {
                    "n": int(s["n"]),
                    "sealed": [int(x) for x in s["sealed"]],
                    "open": {int(k): [int(x) for x in v] for k, v in s["open"].items()},
                    "parts": {int(k): (int(v[0]), [int(x) for x in v[1]])
                              for k, v in s.get("parts", {}).items()},
                }
            return cls(int(d["epoch"]), int(d["seed"]), int(d["split_size"]), sources)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise CorruptCheckpoint(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptCheckpoint(str(exc)) from exc
        return cls.from_dict(doc)

    def __eq__(self, other):
        return isinstance(other, Checkpoint) and self.to_dict() == other.to_dict()


class SplitLedger:
    """Per-epoch record of delivered sample ids, compacted by split.

    All mutation happens under one lock, so drivers may report concurrently.
    """

    def __init__(self, sizes: dict, split_size: int, epoch: int = 0, seed: int = 0):
        self.split_size = split_size
        self.epoch = epoch
        self.seed = seed
        self._src = {sid: _SourceLedger(n, split_size) for sid, n in sizes.items()}
        self._lock = threading.Lock()

    def _units(self, sample: DataSample):
        for m in sample.identity():
            src, seq = m.sample_id
            led = self._src.get(src)
            if led is None or not 0 <= seq < led.n:
                raise UnknownSample(f"sample {m.sample_id} is outside the dataset")
            yield led, seq, m.part

    def classify(self, sample: DataSample) -> str:
        with self._lock:
            return self._classify(sample)

    def _classify(self, sample):
        seen = [led.part_seen(seq, part) for led, seq, part in self._units(sample)]
        if all(seen):
            return DUPLICATE
        if any(seen):
            return MIXED
        # the same unit twice inside one aggregate also counts as mixed
        keys = [(id(led), seq, part) for led, seq, part in self._units(sample)]
        return FRESH if len(keys) == len(set(keys)) else MIXED

    def on_received(self, sample: DataSample) -> str:
        """Record a sample; only fully-fresh samples are committed."""
        with self._lock:
            verdict = self._classify(sample)
            if verdict == FRESH:
                for led, seq, part in self._units(sample):
                    led.mark(seq, part)
            return verdict

    def fresh_units(self, sample: DataSample) -> list:
        with self._lock:
            return [(m.sample_id, m.part) for m, (led, seq, part)
                    in zip(sample.identity(), self._units(sample)) if not led.part_seen(seq, part)]

    def delivered(self, sample_id) -> bool:
        src, seq = sample_id
        with self._lock:
            return self._src[src].delivered(seq)

    def is_sealed(self, source: int, split: int) -> bool:
        with self._lock:
            return self._src[source].is_sealed(split)

    def check_reemit(self, sample_id) -> None:
        src, seq = sample_id
        led = self._src.get(src)
        if led is None or not 0 <= seq < led.n:
            raise UnknownSample(f"sample {sample_id} is outside the dataset")
        if led.is_sealed(seq // self.split_size):
            raise SealedSplit(f"split of sample {sample_id} is already sealed")

    def seen(self, sample_id, part=None) -> bool:
        """True once the unit (whole sample, or one part of it) is delivered."""
        src, seq = sample_id
        with self._lock:
            return self._src[src].part_seen(seq, part)

    def missing_parts(self, sample_id):
        """Part indexes still owed for a flattened sample, or None if unknown."""
        src, seq = sample_id
        with self._lock:
            entry = self._src[src].parts.get(seq)
            if entry is None:
                return None
            count, got = entry
            return tuple(i for i in range(count) if i not in got)

    def complete(self) -> bool:
        with self._lock:
            return all(led.complete() for led in self._src.values())

    def remaining(self, source: int) -> list:
        with self._lock:
            led = self._src[source]
            return [q for q in range(led.n) if not led.delivered(q)]

    def open_splits(self, source: int) -> dict:
        with self._lock:
            return {k: frozenset(v) for k, v in self._src[source].open.items()}

    def sealed(self, source: int) -> list:
        with self._lock:
            return self._src[source].sealed_list()

    def tracked_entries(self) -> int:
        """Per-sample/per-split entries held: bounded by open splits x split_size."""
        with self._lock:
            return sum(led.tracked() for led in self._src.values())

    def checkpoint(self) -> Checkpoint:
        with self._lock:
            return Checkpoint(
                epoch=self.epoch,
                seed=self.seed,
                split_size=self.split_size,
                sources={
                    sid: {
                        "n": led.n,
                        "sealed": led.sealed_list(),
                        "open": {k: sorted(v) for k, v in led.open.items()},
                        "parts": {k: (c, sorted(p)) for k, (c, p) in led.parts.items()},
                    }
                    for sid, led in self._src.items()
                },
            )

    @classmethod
    def restore(cls, ckpt: Checkpoint, sizes=None) -> "SplitLedger":
        if ckpt.version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {ckpt.version}")
        sizes = sizes or {sid: s["n"] for sid, s in ckpt.sources.items()}
        ledger = cls(sizes, ckpt.split_size, ckpt.epoch, ckpt.seed)
        for sid, s in ckpt.sources.items():
            led = ledger._src.get(sid)
            if led is None or led.n != s["n"]:
                raise CorruptCheckpoint(f"source {sid} does not match the checkpoint")
            for split in s["sealed"]:
                if not 0 <= split < led.n_splits:
                    raise CorruptCheckpoint(f"sealed split {split} out of range")
                led.sealed_extra.add(split)
            while led.sealed_below in led.sealed_extra:
                led.sealed_extra.discard(led.sealed_below)
                led.sealed_below += 1
            for split, seqs in s["open"].items():
                for q in seqs:
                    if q // led.split_size != split:
                        raise CorruptCheckpoint(f"seq {q} is not in split {split}")
                    led.mark(q)
            for seq, (count, got) in s.get("parts", {}).items():
                led.parts[seq] = (count, set(got))
        return ledger

    def skip_plan(self, source: int) -> tuple:
        """``(sealed splits, delivered seqs in open splits, partial parts)`` for
        resuming a source."""
        with self._lock:
            led = self._src[source]
            return (
                frozenset(led.sealed_list()),
                frozenset(q for v in led.open.values() for q in v),
                {q: frozenset(range(c)) - frozenset(p) for q, (c, p) in led.parts.items()},
            )


class OrderGate:
    """Releases samples in ascending per-source sequence order.

    ``is_done(source, seq)`` reports ids that will never arrive (already
    delivered before a restore), which the gate skips over.
    """

    def __init__(self, capacity: int, is_done=None):
        self.capacity = capacity
        self._next: dict = {}
        self._buf: dict = {}
        self._is_done = is_done or (lambda s, q: False)
        self._parts_left: dict = {}

    def _key(self, sample: DataSample):
        ids = sorted(m.sample_id for m in sample.identity())
        return ids[0][0], ids[0][1], ids[-1][1]

    @property
    def buffered(self) -> int:
        return sum(len(b) for b in self._buf.values())

    def offer(self, sample: DataSample) -> list:
        src, lo, hi = self._key(sample)
        nxt = self._advance(src, self._next.get(src, 0))
        self._next[src] = nxt
        if lo == nxt:
            out = [sample]
            self._consumed(src, sample, hi)
            out.extend(self._drain(src))
            return out
        buf = self._buf.setdefault(src, {})
        buf.setdefault(lo, []).append((hi, sample))
        if self.buffered > self.capacity:
            raise OrderBufferOverflow(
                f"{self.buffered} out-of-order samples exceed capacity {self.capacity}")
        return []

    def _consumed(self, src, sample, hi):
        if sample.part is not None and sample.members is None:
            seq = sample.sample_id[1]
            left = self._parts_left.setdefault((src, seq), set(range(sample.part[1])))
            left.discard(sample.part[0])
            if left:
                return
            del self._parts_left[(src, seq)]
        self._next[src] = self._advance(src, hi + 1)

    def _advance(self, src, nxt):
        while self._is_done(src, nxt):
            nxt += 1
        return nxt

    def _drain(self, src):
        out = []
        buf = self._buf.get(src, {})
        while True:
            nxt = self._advance(src, self._next[src])
            self._next[src] = nxt
            entries = buf.get(nxt)
            if not entries:
                return out
            hi, sample = entries.pop(0)
            if not entries:
                del buf[nxt]
            out.append(sample)
            self._consumed(src, sample, hi)
