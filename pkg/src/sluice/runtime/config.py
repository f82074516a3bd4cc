"""Runtime knobs shared by drivers, the client and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

DEFAULT_PREFETCH_CAPACITY = 32
DEFAULT_RETRY_LIMIT = 3


@dataclass(frozen=True)
class RuntimeConfig:
    seed: int = 0
    batch_size: int = 32
    trace_period: Optional[int] = 100  # None disables tracing
    shards: int = 1
    prefetch_capacity: int = DEFAULT_PREFETCH_CAPACITY
    retry_limit: int = DEFAULT_RETRY_LIMIT
    # re-emits caused by lost connections or mixed aggregates, per sample
    infra_retry_limit: int = 50
    strict_order: bool = False
    order_capacity: Optional[int] = None  # default 4 x split_size
    stall_timeout: float = 120.0
    heartbeat_interval: float = 1.0
    heartbeat_timeout: float = 5.0
    reconnect_timeout: float = 10.0
    drain_timeout: float = 30.0
    cache_dir: Optional[str] = None
    # bytes/s; when set, cache reads are slowed to this bandwidth
    disk_bandwidth: Optional[float] = None
    # modules imported by driver processes and local workers (custom transforms)
    plugins: tuple = ()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prefetch_capacity < 1:
            raise ValueError("prefetch_capacity must be >= 1")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")

    def replace(self, **kw) -> "RuntimeConfig":
        return replace(self, **kw)
