"""DataSample envelope and per-sample seed derivation."""
from __future__ import annotations

import hashlib
import struct
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Optional

SampleId = tuple  # (source index, sequence number)

_UUID_NS = uuid.UUID("6f1c3a52-1d7e-4c55-9a57-0e7d4b6c2a10")


@dataclass(frozen=True)
class Member:
    """One identity unit folded into an aggregated sample.

    ``part`` is ``(index, count)`` when the unit is one piece of a flattened
    sample, otherwise ``None``.
    """

    sample_id: tuple
    part: Optional[tuple] = None


@dataclass
class DataSample:
    sample_id: tuple
    split_id: int
    payload: bytes = b""
    meta: dict = field(default_factory=dict)
    trace: Optional[list] = None
    tombstone: bool = False
    part: Optional[tuple] = None
    members: Optional[tuple] = None

    @property
    def uuid(self) -> uuid.UUID:
        """Stable wire alias of the sample identity."""
        s, q = self.sample_id
        return uuid.uuid5(_UUID_NS, f"{s}:{q}")

    @property
    def traced(self) -> bool:
        return self.trace is not None

    @property
    def nbytes(self) -> int:
        return 0 if self.tombstone else len(self.payload)

    def identity(self) -> tuple:
        """All identity units carried by this sample."""
        if self.members is not None:
            return self.members
        return (Member(self.sample_id, self.part),)

    def dropped(self) -> "DataSample":
        """Tombstone copy: identity kept, payload discarded."""
        return replace(self, payload=b"", tombstone=True)


def derive_seed(global_seed: int, epoch: int, sample_id: tuple, pipe_id: int) -> int:
    """Deterministic 63-bit seed for one (sample, pipe) application."""
    s, q = sample_id
    raw = struct.pack(">qqqqq", global_seed, epoch, s, q, pipe_id)
    digest = hashlib.blake2b(raw, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def split_of(seq: int, split_size: int) -> int:
    return seq // split_size


def meta_scalar(value: Any) -> bool:
    return isinstance(value, (bool, int, float, str, bytes)) or value is None
