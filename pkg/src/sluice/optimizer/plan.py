"""Physical plans and cost-model parameters.

Plan file (JSON, ``version`` 1)::

    {"version": 1,
     "graph": {...},                  # baseline LogicalGraph, see LogicalGraph.to_dict
     "ordering": [ids...],            # full node order after reordering
     "cache_site": id | null,         # node whose output edge carries the cache
     "assignment": {"<id>": "<variant key>"},   # non-base pipes only
     "fusion_groups": [[ids...], ...],
     "prefetch_sites": [ids...],      # nodes followed by a prefetch buffer
     "shards": n, "cost": seconds-per-sample}
"""
from __future__ import annotations

import functools
import json
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional

from ..errors import CorruptFile
from ..graph.constraints import reordered
from ..graph.model import LogicalGraph, PipeNode, TransformSpec, fused_node, replace_with_fused, splice_after
from ..runtime.variants import BASE_VARIANT, VariantDescriptor

PLAN_VERSION = 1
FALLBACK_DISK_FACTOR = 1e-8


@functools.lru_cache(maxsize=1)
def measure_disk_factor(nbytes: int = 8 << 20) -> float:
    """Seconds per byte of a sequential read of a freshly written temp file."""
    try:
        with tempfile.NamedTemporaryFile() as fh:
            fh.write(os.urandom(1 << 20) * (nbytes >> 20))
            fh.flush()
            os.fsync(fh.fileno())
            fh.seek(0)
            t0 = time.perf_counter()
            while fh.read(1 << 20):
                pass
            elapsed = time.perf_counter() - t0
    except OSError:
        return FALLBACK_DISK_FACTOR
    return elapsed / nbytes if elapsed > 0 else FALLBACK_DISK_FACTOR


@dataclass(frozen=True)
class CostModelParams:
    d: Optional[float] = None
    size_raw: Optional[float] = None
    shard_tput_threshold: float = 1000.0
    clamp_floor: float = 0.0
    cores: int = field(default_factory=lambda: os.cpu_count() or 1)
    plan_cap: int = 10 ** 7
    prefetch_capacity: int = 32

    def __post_init__(self):
        if self.d is None:
            object.__setattr__(self, "d", measure_disk_factor())
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.shard_tput_threshold <= 0:
            raise ValueError("shard_tput_threshold must be positive")
        if self.cores < 1:
            raise ValueError("cores must be >= 1")


@dataclass(frozen=True)
class Plan:
    base: LogicalGraph
    ordering: tuple
    cache_site: Optional[int] = None
    assignment: tuple = ()
    fusion_groups: tuple = ()
    prefetch_sites: tuple = ()
    shards: int = 1
    cost: Optional[float] = None
    notes: tuple = ()

    @classmethod
    def baseline(cls, graph: LogicalGraph) -> "Plan":
        return cls(graph, graph.topo_order())

    @cached_property
    def graph(self) -> LogicalGraph:
        return reordered(self.base, self.ordering)

    @cached_property
    def variants(self) -> dict:
        return dict(self.assignment)

    def variant(self, pid: int) -> VariantDescriptor:
        return self.variants.get(pid, BASE_VARIANT)

    @property
    def offloaded(self) -> tuple:
        return tuple(p for p, v in self.assignment if not v.is_base)

    def with_(self, **kw) -> "Plan":
        if "assignment" in kw:
            kw["assignment"] = tuple(sorted((p, v) for p, v in dict(kw["assignment"]).items()
                                            if not v.is_base))
        return replace(self, **kw)

    def note(self, name: str, **info) -> "Plan":
        return replace(self, notes=self.notes + ((name, info),))

    # physical graph -----------------------------------------------------
    def new_ids(self) -> dict:
        """Ids for the pipes the passes add: cache, fused groups, prefetches."""
        nxt = max(n.id for n in self.base.nodes) + 1
        out = {"cache": None, "fused": [], "prefetch": []}
        if self.cache_site is not None:
            out["cache"] = nxt
            nxt += 1
        for _ in self.fusion_groups:
            out["fused"].append(nxt)
            nxt += 1
        for _ in self.prefetch_sites:
            out["prefetch"].append(nxt)
            nxt += 1
        return out

    def physical(self, prefetch_capacity: int = 32) -> tuple:
        """``(graph, assignment)`` with cache, fused and prefetch nodes materialized."""
        g = self.graph
        ids = self.new_ids()
        assignment = {p: v for p, v in self.assignment}
        where = {n.id: n.id for n in g.nodes}  # base id -> physical node carrying its output
        for fid, group in zip(ids["fused"], self.fusion_groups):
            g = replace_with_fused(g, fused_node(g, group, fid))
            for q in group:
                where[q] = fid
                assignment.pop(q, None)
            assignment[fid] = self.variant(group[0])
        if self.cache_site is not None:
            cid = ids["cache"]
            g = splice_after(g, where[self.cache_site], PipeNode(cid, TransformSpec("cache", (), "cache"), fixed=True))
            where[self.cache_site] = cid
        cap = (("capacity", prefetch_capacity),)
        for pid, site in zip(ids["prefetch"], self.prefetch_sites):
            g = splice_after(g, where[site], PipeNode(pid, TransformSpec("prefetch", cap, "prefetch"), fixed=True))
            where[site] = pid
        order = {n: i for i, n in enumerate(self.ordering)}
        node_list = sorted(g.nodes, key=lambda n: (order.get(n.id, len(order)), n.id))
        return LogicalGraph(tuple(node_list), tuple(sorted(g.edges)), self.base.bindings), assignment

    # persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": PLAN_VERSION,
            "graph": self.base.to_dict(),
            "ordering": list(self.ordering),
            "cache_site": self.cache_site,
            "assignment": {str(p): v.key() for p, v in self.assignment},
            "fusion_groups": [list(g) for g in self.fusion_groups],
            "prefetch_sites": list(self.prefetch_sites),
            "shards": self.shards,
            "cost": self.cost,
        }

    @classmethod
    def from_dict(cls, d: dict, bindings=()) -> "Plan":
        if not isinstance(d, dict) or d.get("version") != PLAN_VERSION:
            raise CorruptFile("unsupported plan file version")
        try:
            base = LogicalGraph.from_dict(d["graph"])
            base = replace(base, bindings=tuple(bindings))
            return cls(
                base,
                tuple(d["ordering"]),
                d.get("cache_site"),
                tuple(sorted((int(p), VariantDescriptor.parse(k)) for p, k in d["assignment"].items())),
                tuple(tuple(g) for g in d["fusion_groups"]),
                tuple(d["prefetch_sites"]),
                int(d["shards"]),
                d.get("cost"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, bindings=()) -> "Plan":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptFile(str(exc)) from exc
        return cls.from_dict(doc, bindings)
