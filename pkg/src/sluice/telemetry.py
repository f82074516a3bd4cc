"""Per-sample tracing, the metadata store, and profiling jobs.

Stats file (JSON, ``version`` 2)::

    {"version": 2,
     "tput_base": float | null,          # samples/s of the baseline plan
     "size_raw": float | null,           # mean raw bytes per source sample
     "current_throughput": float,        # rolling samples/s       (added in v2)
     "output_buffer_len": float,         # rolling mean occupancy  (added in v2)
     "pipes": {"<pipe id>": {
         "lat_ns": [sum, n],             # base-variant latency, integer ns
         "size_in": [sum, n], "size_out": [sum, n],
         "lat_v": {"<variant key>": [sum_ns, n]},
         "tput_v": {"<variant key>": [sum, n]}}}}

Version 1 files lack the two rolling fields; they load with zeros.

Trace log: one JSON object per line with keys ``sample``, ``pipe``,
``latency_ns``, ``bytes_in``, ``bytes_out``, ``variant``, ``buffer_len``.
"""
from __future__ import annotations

import collections
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import CorruptFile, InvalidPeriod, InvalidSampleCount, UnknownPipeId

STATS_VERSION = 2
DEFAULT_TRACE_PERIOD = 100
THROUGHPUT_WINDOW = 1000


@dataclass(frozen=True)
class TraceRecord:
    pipe_id: int
    latency_ns: int
    bytes_in: int
    bytes_out: int
    variant: str = "base"
    buffer_len: Optional[int] = None

    def __post_init__(self):
        if self.latency_ns < 0 or self.bytes_in < 0 or self.bytes_out < 0:
            raise ValueError(f"negative trace field in {self}")


class TraceMarker:
    """Marks every ``period``-th sample (by sequence number) for tracing."""

    def __init__(self, period: int):
        if period is None or int(period) < 1:
            raise InvalidPeriod(f"trace period must be >= 1, got {period!r}")
        self.period = int(period)

    def wants(self, seq: int) -> bool:
        return seq % self.period == 0

    def mark(self, sample):
        sample.trace = [] if self.wants(sample.sample_id[1]) else None
        return sample


def mark_for_trace(samples, period: int):
    """Yield ``samples`` with every ``period``-th one carrying an empty trace."""
    marker = TraceMarker(period)
    for s in samples:
        yield marker.mark(s)


class _Mean:
    __slots__ = ("total", "n")

    def __init__(self, total=0, n=0):
        self.total = total
        self.n = n

    def add(self, x):
        self.total += x
        self.n += 1

    @property
    def value(self):
        return self.total / self.n if self.n else None

    def dump(self):
        return [self.total, self.n]


@dataclass
class PipeStats:
    lat_ns: _Mean = field(default_factory=_Mean)
    size_in_m: _Mean = field(default_factory=_Mean)
    size_out_m: _Mean = field(default_factory=_Mean)
    lat_v: dict = field(default_factory=dict)
    tput_v_m: dict = field(default_factory=dict)

    @property
    def lat_base(self) -> Optional[float]:
        v = self.lat_ns.value
        return None if v is None else v / 1e9

    @property
    def size_in(self) -> Optional[float]:
        return self.size_in_m.value

    @property
    def size_out(self) -> Optional[float]:
        return self.size_out_m.value

    @property
    def tput_v(self) -> dict:
        from .runtime.variants import VariantDescriptor

        return {VariantDescriptor.parse(k): m.value for k, m in self.tput_v_m.items()}

    @property
    def n_observations(self) -> dict:
        return {"lat_base": self.lat_ns.n, "size_in": self.size_in_m.n,
                "size_out": self.size_out_m.n,
                "tput_v": {k: m.n for k, m in self.tput_v_m.items()}}

    def dump(self) -> dict:
        return {
            "lat_ns": self.lat_ns.dump(),
            "size_in": self.size_in_m.dump(),
            "size_out": self.size_out_m.dump(),
            "lat_v": {k: m.dump() for k, m in sorted(self.lat_v.items())},
            "tput_v": {k: m.dump() for k, m in sorted(self.tput_v_m.items())},
        }

    @classmethod
    def load(cls, d: dict) -> "PipeStats":
        return cls(
            _Mean(*d["lat_ns"]),
            _Mean(*d["size_in"]),
            _Mean(*d["size_out"]),
            {k: _Mean(*v) for k, v in d.get("lat_v", {}).items()},
            {k: _Mean(*v) for k, v in d.get("tput_v", {}).items()},
        )


class MetadataStore:
    """Aggregated statistics for one dataset; folds are serialized internally."""

    def __init__(self, pipe_ids=(), trace_log=None, window: int = THROUGHPUT_WINDOW):
        self.pipes: dict = {int(p): PipeStats() for p in pipe_ids}
        self.tput_base: Optional[float] = None
        self._size_raw: Optional[float] = None
        self.current_throughput = 0.0
        self.output_buffer_len = 0.0
        self._deliveries = collections.deque(maxlen=window)
        self._buffer_obs = collections.deque(maxlen=window)
        self._lock = threading.RLock()
        self._trace_log = open(trace_log, "a") if trace_log else None
        self.source_ids: set = set()

    # registration -----------------------------------------------------
    def register(self, pipe_id: int, source: bool = False) -> None:
        with self._lock:
            self.pipes.setdefault(int(pipe_id), PipeStats())
            if source:
                self.source_ids.add(int(pipe_id))

    def register_graph(self, graph) -> None:
        for n in graph.nodes:
            self.register(n.id, n.kind == "source")

    def pipe(self, pipe_id: int) -> PipeStats:
        try:
            return self.pipes[int(pipe_id)]
        except KeyError:
            raise UnknownPipeId(pipe_id) from None

    # folding ----------------------------------------------------------
    def fold(self, rec: TraceRecord, sample_id=None) -> None:
        with self._lock:
            st = self.pipes.get(rec.pipe_id)
            if st is None:
                raise UnknownPipeId(rec.pipe_id)
            if rec.variant == "base":
                st.lat_ns.add(rec.latency_ns)
            else:
                st.lat_v.setdefault(rec.variant, _Mean()).add(rec.latency_ns)
            if rec.pipe_id not in self.source_ids:
                st.size_in_m.add(rec.bytes_in)
            st.size_out_m.add(rec.bytes_out)
            if self._trace_log is not None:
                self._trace_log.write(json.dumps({
                    "sample": list(sample_id) if sample_id else None, "pipe": rec.pipe_id,
                    "latency_ns": rec.latency_ns, "bytes_in": rec.bytes_in,
                    "bytes_out": rec.bytes_out, "variant": rec.variant,
                    "buffer_len": rec.buffer_len}) + "\n")

    def record(self, sample) -> None:
        """Fold a received sample's trace into the per-pipe statistics."""
        if not sample.trace:
            return
        with self._lock:
            for rec in sample.trace:
                if rec.pipe_id not in self.pipes:
                    raise UnknownPipeId(rec.pipe_id)
            for rec in sample.trace:
                self.fold(rec, sample.sample_id)

    def note_delivery(self, count: int = 1, now: Optional[float] = None) -> None:
        now = time.monotonic() if now is None else now
        with self._lock:
            for _ in range(count):
                self._deliveries.append(now)
            if len(self._deliveries) >= 2:
                span = self._deliveries[-1] - self._deliveries[0]
                if span > 0:
                    self.current_throughput = (len(self._deliveries) - 1) / span

    def observe_output_buffer(self, length: int) -> None:
        with self._lock:
            self._buffer_obs.append(length)
            self.output_buffer_len = sum(self._buffer_obs) / len(self._buffer_obs)

    def put(self, pipe_id: int, lat_base=None, size_in=None, size_out=None, tput_v=None) -> None:
        """Overwrite a pipe's statistics with single observations (fixtures, imports)."""
        with self._lock:
            st = self.pipes.setdefault(int(pipe_id), PipeStats())
            if lat_base is not None:
                st.lat_ns = _Mean(lat_base * 1e9, 1)
            if size_in is not None:
                st.size_in_m = _Mean(size_in, 1)
            if size_out is not None:
                st.size_out_m = _Mean(size_out, 1)
            for v, t in (tput_v or {}).items():
                st.tput_v_m[str(v)] = _Mean(float(t), 1)

    def set_tput_v(self, pipe_id: int, variant, value: float) -> None:
        with self._lock:
            self.pipe(pipe_id).tput_v_m.setdefault(str(variant), _Mean()).add(float(value))

    @property
    def size_raw(self) -> Optional[float]:
        if self._size_raw is not None:
            return self._size_raw
        outs = [self.pipes[s].size_out for s in sorted(self.source_ids) if s in self.pipes]
        outs = [o for o in outs if o is not None]
        return sum(outs) / len(outs) if outs else None

    @size_raw.setter
    def size_raw(self, value):
        self._size_raw = value

    def close(self):
        if self._trace_log is not None:
            self._trace_log.close()
            self._trace_log = None

    # completeness -----------------------------------------------------
    def missing(self, graph, variants_by_pipe=None) -> list:
        """Names of statistics the optimizer would need but does not have."""
        out = []
        if not self.tput_base:
            out.append("tput_base")
        if self.size_raw is None:
            out.append("size_raw")
        for n in graph.nodes:
            st = self.pipes.get(n.id)
            if st is None or st.lat_base is None:
                out.append(f"lat_base[{n.id}]")
                continue
            if n.kind != "source" and (st.size_in is None or st.size_out is None):
                out.append(f"size[{n.id}]")
            for v in (variants_by_pipe or {}).get(n.id, ()):
                if v.is_base:
                    continue
                if st.tput_v_m.get(v.key()) is None:
                    out.append(f"tput_v[{n.id}][{v.key()}]")
        return out

    # persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        with self._lock:
            return {
                "version": STATS_VERSION,
                "tput_base": self.tput_base,
                "size_raw": self._size_raw,
                "current_throughput": self.current_throughput,
                "output_buffer_len": self.output_buffer_len,
                "sources": sorted(self.source_ids),
                "pipes": {str(k): v.dump() for k, v in sorted(self.pipes.items())},
            }

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataStore":
        if not isinstance(d, dict) or d.get("version") not in (1, STATS_VERSION):
            raise CorruptFile(f"unsupported stats version {d.get('version') if isinstance(d, dict) else None!r}")
        try:
            store = cls()
            store.tput_base = d["tput_base"]
            store._size_raw = d.get("size_raw")
            store.current_throughput = float(d.get("current_throughput", 0.0))
            store.output_buffer_len = float(d.get("output_buffer_len", 0.0))
            store.source_ids = set(int(s) for s in d.get("sources", ()))
            store.pipes = {int(k): PipeStats.load(v) for k, v in d["pipes"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(str(exc)) from exc
        return store

    def __eq__(self, other):
        return isinstance(other, MetadataStore) and self.to_dict() == other.to_dict()


def persist(store: MetadataStore, path) -> None:
    Path(path).write_text(json.dumps(store.to_dict(), indent=1, sort_keys=True))


def load(path) -> MetadataStore:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return MetadataStore.from_dict(doc)


def profile(graph, backends=(), n_samples: Optional[int] = None, *, config=None,
            store: Optional[MetadataStore] = None, log=None) -> MetadataStore:
    """Run the baseline plan fully traced, then one run per (pipe, variant).

    Every run streams the first ``n_samples`` samples of the bound sources.
    Variant runs offload only the pipe under test, at the backend's configured
    parallelism, with the prefetch placement the optimizer would give it.
    """
    from .runtime.dataset import DataSet, RuntimeConfig
    from .graph.sources import LimitedSource

    config = config or RuntimeConfig()
    if n_samples is None:
        split = min(b.split_size for _, b in graph.bindings)
        n_samples = 4 * split
    if n_samples <= 0:
        raise InvalidSampleCount(f"n_samples must be positive, got {n_samples}")
    limited = graph
    for sid, b in graph.bindings:
        limited = limited.with_binding(sid, LimitedSource(b, n_samples))
    store = store or MetadataStore()
    store.register_graph(graph)
    runs = []

    base_cfg = config.replace(trace_period=1, shards=1)
    with DataSet(limited, backends=backends, config=base_cfg, store=store) as ds:
        ds.validate_backends()
        tput = ds.measure_throughput()
    store.tput_base = tput
    runs.append(("base", None, tput))
    if log:
        log(f"baseline: {tput:.1f} samples/s")

    for pid in graph.pipe_ids:
        node = graph.node(pid)
        for backend in backends:
            if not node.offloadable:
                continue
            v = backend.variant()
            probe = MetadataStore()
            probe.register_graph(graph)
            with DataSet(limited, backends=backends, config=config.replace(trace_period=None, shards=1),
                         store=probe) as ds:
                ds.assign(pid, v)
                ds.insert_default_prefetch()
                t = ds.measure_throughput()
            store.set_tput_v(pid, v, t)
            runs.append((pid, v.key(), t))
            if log:
                log(f"pipe {pid} on {v.key()}: {t:.1f} samples/s")
    store.profile_runs = runs
    return store
