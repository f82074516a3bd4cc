"""Physical bindings of pipes to execution backends."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

from ..errors import UnsupportedVariant

BASE = "base"
LOCAL_POOL = "local_pool"
REMOTE_POOL = "remote_pool"
CACHE_READ = "cache_read"
VARIANT_KINDS = (BASE, LOCAL_POOL, REMOTE_POOL, CACHE_READ)


@dataclass(frozen=True, order=True)
class VariantDescriptor:
    kind: str = BASE
    parallelism: int = 0
    endpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise UnsupportedVariant(f"unknown variant kind {self.kind!r}")
        if self.parallelism < 0:
            raise UnsupportedVariant("parallelism must be >= 0")
        if self.kind == REMOTE_POOL and not self.endpoint:
            raise UnsupportedVariant("remote_pool requires an endpoint")

    @property
    def is_base(self) -> bool:
        return self.kind == BASE

    @property
    def pooled(self) -> bool:
        return self.kind in (LOCAL_POOL, REMOTE_POOL)

    def family(self) -> tuple:
        """Identity ignoring parallelism: two descriptors of one backend."""
        return (self.kind, self.endpoint)

    def with_parallelism(self, n: int) -> "VariantDescriptor":
        return VariantDescriptor(self.kind, n, self.endpoint)

    def key(self) -> str:
        if self.kind in (BASE, CACHE_READ):
            return self.kind
        s = f"{self.kind}:{self.parallelism}"
        return f"{s}@{self.endpoint}" if self.endpoint else s

    @classmethod
    def parse(cls, key: str) -> "VariantDescriptor":
        if key in (BASE, CACHE_READ):
            return cls(key)
        head, _, endpoint = key.partition("@")
        kind, _, par = head.partition(":")
        return cls(kind, int(par or 0), endpoint or None)

    def __str__(self):
        return self.key()


BASE_VARIANT = VariantDescriptor(BASE)


@dataclass(frozen=True)
class Backend:
    """An enabled execution backend offering one pooled variant.

    ``cap`` is the most executors the backend will run at once; ``link_bandwidth``
    (bytes/s) and ``rpc_overhead_us`` emulate the network between a driver and
    a remote backend, both ``None``/0 meaning no emulation.
    """

    kind: str
    parallelism: int = 1
    endpoint: Optional[str] = None
    cap: int = 0
    link_bandwidth: Optional[float] = None
    rpc_overhead_us: float = 0.0

    def variant(self, parallelism: Optional[int] = None) -> VariantDescriptor:
        return VariantDescriptor(self.kind, self.parallelism if parallelism is None else parallelism,
                                 self.endpoint)

    @property
    def effective_cap(self) -> int:
        return self.cap or max(self.parallelism, os.cpu_count() or 1)


def parse_backend(text: str) -> Backend:
    """``local:N[:CAP]`` or ``remote:HOST:PORT[:N[:BANDWIDTH]]``."""
    kind, _, rest = text.partition(":")
    if kind == "local":
        parts = rest.split(":") if rest else []
        n = int(parts[0]) if parts else 1
        cap = int(parts[1]) if len(parts) > 1 else 0
        return Backend(LOCAL_POOL, n, cap=cap)
    if kind == "remote":
        parts = rest.split(":")
        if len(parts) < 2:
            raise ValueError(f"remote backend needs HOST:PORT, got {text!r}")
        endpoint = f"{parts[0]}:{parts[1]}"
        n = int(parts[2]) if len(parts) > 2 else 1
        bw = float(parts[3]) if len(parts) > 3 else None
        return Backend(REMOTE_POOL, n, endpoint, link_bandwidth=bw)
    raise ValueError(f"cannot parse backend {text!r}")
