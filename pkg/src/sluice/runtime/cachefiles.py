"""Per-split cache files written at the cache node.

File layout: the 8-byte magic ``SLCACHE1``, then records of ``u32 length``
followed by one codec-encoded DataSample (traces stripped). A split is first
written to ``s<source>-<split>.part``; once the epoch ends, parts holding
every sequence number of their split are renamed to ``.split`` and the rest
are deleted. Only ``.split`` files are ever read.
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
import time
from dataclasses import replace
from pathlib import Path

from ..errors import FrameError
from ..remote import codec

MAGIC = b"SLCACHE1"
_U32 = struct.Struct(">I")


def signature(graph, cache_id: int) -> str:
    """Digest of everything that determines the cached bytes."""
    ups = sorted(graph.ancestors(cache_id))
    doc = {
        "pipes": [graph.node(i).to_dict() for i in ups],
        "edges": sorted(e for e in graph.edges if e[0] in ups and e[1] in ups),
        "sources": [b.describe() for _, b in graph.bindings],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def read_records(path) -> list:
    """Samples in a cache file; a truncated tail is ignored."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        return []
    out, pos = [], len(MAGIC)
    while pos + 4 <= len(data):
        (n,) = _U32.unpack_from(data, pos)
        if pos + 4 + n > len(data):
            break
        try:
            out.append(codec.decode_sample(data[pos + 4:pos + 4 + n]))
        except FrameError:
            break
        pos += 4 + n
    return out


class CacheDir:
    def __init__(self, root, sig: str):
        self.path = Path(root) / sig
        self.path.mkdir(parents=True, exist_ok=True)

    def part(self, src, split) -> Path:
        return self.path / f"s{src}-{split}.part"

    def final(self, src, split) -> Path:
        return self.path / f"s{src}-{split}.split"

    def has(self, src, split) -> bool:
        return self.final(src, split).exists()

    def complete(self, sources: dict) -> bool:
        """True when every split of every source ``{index: binding}`` is cached."""
        return all(self.has(s, k) for s, b in sources.items() for k in range(b.n_splits))

    def invalidate_partial(self) -> None:
        for p in self.path.glob("*.part"):
            p.unlink(missing_ok=True)

    def finalize(self, sources: dict) -> list:
        """Promote complete part files; returns the ``(source, split)`` pairs promoted."""
        done = []
        for p in sorted(self.path.glob("*.part")):
            src, split = (int(x) for x in p.stem[1:].split("-"))
            b = sources.get(src)
            want = set(b.split_members(split)) if b is not None else None
            got = {s.sample_id[1] for s in read_records(p)}
            if want and got >= want:
                p.replace(self.final(src, split))
                done.append((src, split))
            else:
                p.unlink(missing_ok=True)
        return done


class CacheWriter:
    def __init__(self, cdir: CacheDir):
        self.cdir = cdir
        self._files: dict = {}
        self._lock = threading.Lock()

    def write(self, sample) -> None:
        src, _ = sample.sample_id
        raw = codec.encode_sample(replace(sample, trace=None))
        with self._lock:
            key = (src, sample.split_id)
            fh = self._files.get(key)
            if fh is None:
                fh = open(self.cdir.part(*key), "ab")
                if fh.tell() == 0:
                    fh.write(MAGIC)
                self._files[key] = fh
            fh.write(_U32.pack(len(raw)) + raw)
            fh.flush()

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()


class CacheReader:
    """Serves samples from finalized split files, optionally at a set disk bandwidth."""

    def __init__(self, cdir: CacheDir, split_size: int, bandwidth=None):
        self.cdir = cdir
        self.split_size = split_size
        self.bandwidth = bandwidth
        self._loaded: dict = {}

    def get(self, src: int, seq: int):
        key = (src, seq // self.split_size)
        table = self._loaded.get(key)
        if table is None:
            if not self.cdir.has(*key):
                return None
            table = {s.sample_id[1]: s for s in read_records(self.cdir.final(*key))}
            self._loaded = {key: table}  # one split at a time
        s = table.get(seq)
        if s is not None and self.bandwidth:
            time.sleep(len(s.payload) / self.bandwidth)
        return s
