"""Enumerable datasets that can be bound to source placeholders."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SPLIT_SIZE = 1024


class SourceBinding:
    """A dataset that yields raw payloads in deterministic sequence order."""

    split_size: int = DEFAULT_SPLIT_SIZE

    def __len__(self) -> int:
        raise NotImplementedError

    def read(self, seq: int) -> bytes:
        raise NotImplementedError

    @property
    def n_splits(self) -> int:
        return -(-len(self) // self.split_size)

    def split_members(self, split_id: int) -> range:
        lo = split_id * self.split_size
        return range(lo, min(len(self), lo + self.split_size))

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass
class DirectorySource(SourceBinding):
    """One sample per regular file, ordered by file name."""

    path: str
    split_size: int = DEFAULT_SPLIT_SIZE

    def __post_init__(self):
        root = Path(self.path)
        self._files = sorted(str(p) for p in root.iterdir() if p.is_file())

    def __len__(self):
        return len(self._files)

    def read(self, seq):
        with open(self._files[seq], "rb") as fh:
            return fh.read()

    def describe(self):
        return {"type": "directory", "path": os.fspath(self.path), "split_size": self.split_size}


@dataclass
class SyntheticSource(SourceBinding):
    """Seeded pseudo-random blobs; ``read_cost_us`` emulates storage latency.

    ``tagged`` prefixes each payload with ``sample-<seq>;`` so tests can aim
    failures at specific samples.
    """

    n: int
    size: int = 1024
    seed: int = 0
    split_size: int = DEFAULT_SPLIT_SIZE
    read_cost_us: float = 0.0
    tagged: bool = False

    def __len__(self):
        return self.n

    def read(self, seq):
        started = time.perf_counter()
        rng = np.random.default_rng((self.seed, seq))
        body = rng.integers(0, 256, size=self.size, dtype=np.uint8).tobytes()
        if self.tagged:
            tag = f"sample-{seq};".encode()
            body = (tag + body)[: max(self.size, len(tag))]
        if self.read_cost_us:
            remaining = started + self.read_cost_us * 1e-6 - time.perf_counter()
            if remaining > 0:
                time.sleep(remaining)
        return body

    def describe(self):
        return {"type": "synthetic", "n": self.n, "size": self.size, "seed": self.seed,
                "split_size": self.split_size, "read_cost_us": self.read_cost_us,
                "tagged": self.tagged}


@dataclass
class LimitedSource(SourceBinding):
    """First ``limit`` samples of another source (used by profiling runs)."""

    inner: SourceBinding
    limit: int

    def __post_init__(self):
        self.split_size = self.inner.split_size

    def __len__(self):
        return min(self.limit, len(self.inner))

    def read(self, seq):
        return self.inner.read(seq)

    def describe(self):
        return {"type": "limited", "limit": self.limit, "inner": self.inner.describe()}


def source_from_dict(d: dict) -> SourceBinding:
    kind = d.get("type")
    if kind == "directory":
        return DirectorySource(d["path"], int(d.get("split_size", DEFAULT_SPLIT_SIZE)))
    if kind == "synthetic":
        return SyntheticSource(int(d["n"]), int(d.get("size", 1024)), int(d.get("seed", 0)),
                               int(d.get("split_size", DEFAULT_SPLIT_SIZE)),
                               float(d.get("read_cost_us", 0.0)), bool(d.get("tagged", False)))
    if kind == "limited":
        return LimitedSource(source_from_dict(d["inner"]), int(d["limit"]))
    raise ValueError(f"unknown source type {kind!r}")


def parse_source_arg(text: str, split_size: int = DEFAULT_SPLIT_SIZE) -> SourceBinding:
    """``dir:PATH`` or ``synthetic:N[:SIZE[:READ_US]]``."""
    kind, _, rest = text.partition(":")
    if kind == "dir":
        return DirectorySource(rest, split_size)
    if kind == "synthetic":
        parts = rest.split(":")
        n = int(parts[0])
        size = int(parts[1]) if len(parts) > 1 else 1024
        read_us = float(parts[2]) if len(parts) > 2 else 0.0
        return SyntheticSource(n, size, split_size=split_size, read_cost_us=read_us)
    raise ValueError(f"cannot parse source {text!r}")
