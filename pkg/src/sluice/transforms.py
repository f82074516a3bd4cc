"""Transform registry and the built-in byte-level transforms.

Every transform is a pure function of ``(payload, params, seed)``; random
transforms draw from ``numpy.random.default_rng(seed)`` only, which is what
makes remote recomputation byte-identical to local execution.
"""
from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import UnknownTransform

KINDS = ("source", "map", "filter", "batch", "flatten", "zip", "cache", "prefetch", "fused")

ARITY = {
    "source": ("one", "one"),
    "map": ("one", "one"),
    "filter": ("one", "one"),
    "batch": ("many", "one"),
    "flatten": ("one", "many"),
    "zip": ("many", "one"),
    "cache": ("one", "one"),
    "prefetch": ("one", "one"),
    "fused": ("one", "one"),
}


@dataclass(frozen=True)
class TransformEntry:
    name: str
    kind: str
    fn: Callable | None
    offloadable: bool = True
    fusable: bool = True


REGISTRY: dict[str, TransformEntry] = {}


def register_transform(name, kind="map", offloadable=True, fusable=True):
    """Decorator adding ``fn`` to the registry under ``name``."""
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")

    def deco(fn):
        REGISTRY[name] = TransformEntry(name, kind, fn, offloadable, fusable)
        return fn

    return deco


def register_local(name, fn, kind="map"):
    """Escape hatch for opaque closures: runs in-driver only, never offloaded."""
    REGISTRY[name] = TransformEntry(name, kind, fn, offloadable=False, fusable=False)


def lookup(name) -> TransformEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownTransform(name) from None


def _u8(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype=np.uint8)


# structural kinds have no per-sample function
for _name in ("source", "batch", "zip", "cache", "prefetch", "fused"):
    REGISTRY[_name] = TransformEntry(_name, _name, None, offloadable=False, fusable=False)


@register_transform("identity")
def identity(payload, params, seed):
    return payload


@register_transform("decode")
def decode(payload, params, seed):
    factor = int(params.get("factor", 4))
    return np.repeat(_u8(payload), factor).tobytes()


@register_transform("crop")
def crop(payload, params, seed):
    frac = float(params.get("frac", 0.5))
    n = len(payload)
    keep = min(n, max(1, math.ceil(n * frac))) if n else 0
    if params.get("random", False) and n > keep:
        start = int(np.random.default_rng(seed).integers(0, n - keep + 1))
    else:
        start = (n - keep) // 2
    return payload[start:start + keep]


@register_transform("flip")
def flip(payload, params, seed):
    p = float(params.get("p", 0.5))
    if params.get("random", False) and np.random.default_rng(seed).random() >= p:
        return payload
    return payload[::-1]


@register_transform("grayscale")
def grayscale(payload, params, seed):
    return _u8(payload)[:: int(params.get("channels", 3))].tobytes()


@register_transform("to_float")
def to_float(payload, params, seed):
    return _u8(payload).astype(np.float32).tobytes()


@register_transform("normalize")
def normalize(payload, params, seed):
    if len(payload) % 4:
        x = _u8(payload).astype(np.float32)
    else:
        x = np.frombuffer(payload, dtype=np.float32)
    if x.size == 0:
        return b""
    with np.errstate(all="ignore"):  # arbitrary bytes may decode to inf/nan
        return ((x - x.mean()) / (x.std() + 1e-6)).astype(np.float32).tobytes()


@register_transform("blur")
def blur(payload, params, seed):
    k = int(params.get("kernel", 3))
    x = _u8(payload).astype(np.uint32)
    if x.size < k:
        return payload
    c = np.concatenate(([0], np.cumsum(x)))
    out = (c[k:] - c[:-k]) // k
    return np.concatenate((x[: k - 1], out)).astype(np.uint8).tobytes()


@register_transform("jitter")
def jitter(payload, params, seed):
    amp = int(params.get("amplitude", 8))
    x = _u8(payload).astype(np.int16)
    noise = np.random.default_rng(seed).integers(-amp, amp + 1, size=x.size, dtype=np.int16)
    return np.clip(x + noise, 0, 255).astype(np.uint8).tobytes()


@register_transform("truncate")
def truncate(payload, params, seed):
    return payload[: int(params.get("max_len", 128))]


@register_transform("embed")
def embed(payload, params, seed):
    dim = int(params.get("dim", 4))
    x = _u8(payload).astype(np.float32) / 255.0
    return np.repeat(x, dim).tobytes()


@register_transform("drop_mod", kind="filter")
def drop_mod(payload, params, seed):
    """Keep the sample unless its CRC falls in the dropped residue class."""
    modulus = int(params.get("modulus", 2))
    return zlib.crc32(payload) % modulus != int(params.get("residue", 0))


@register_transform("drop_random", kind="filter")
def drop_random(payload, params, seed):
    return np.random.default_rng(seed).random() >= float(params.get("p", 0.5))


@register_transform("chunk", kind="flatten")
def chunk(payload, params, seed):
    parts = int(params.get("parts", 2))
    step = max(1, math.ceil(len(payload) / parts))
    out = [payload[i * step:(i + 1) * step] for i in range(parts)]
    return out


@register_transform("fail_on", offloadable=True)
def fail_on(payload, params, seed):
    """Raises when the payload contains ``marker``; used for failure drills."""
    marker = params.get("marker")
    if marker is not None and marker.encode() in payload:
        raise RuntimeError(f"fail_on marker {marker!r}")
    return payload


def _emulate(started: float, seconds: float, mode: str) -> None:
    deadline = started + seconds
    if mode == "spin":
        while time.perf_counter() < deadline:
            pass
        return
    remaining = deadline - time.perf_counter()
    if remaining > 0:
        time.sleep(remaining)


@register_transform("synthetic")
def synthetic(payload, params, seed):
    """Busy-work operator with a controllable cost and size factor.

    The output is a deterministic function of the input's CRC (and of the
    seed when ``random`` is set), so results stay verifiable while timing is
    set by ``cost_us`` + ``cost_ns_per_byte`` * len(input). ``mode`` selects
    a timed wait (``sleep``) or a spin loop (``spin``).
    """
    started = time.perf_counter()
    crc = zlib.crc32(payload)
    if params.get("random", False):
        crc ^= seed & 0xFFFFFFFF
    factor = float(params.get("size_factor", 1.0))
    n_out = max(1, int(round(len(payload) * factor))) if payload else 0
    x = _u8(payload)
    if n_out and x.size:
        out = np.resize(x, n_out) ^ np.uint8(crc & 0xFF)
        out = out.tobytes()
    else:
        out = crc.to_bytes(4, "big")[:n_out]
    cost = float(params.get("cost_us", 0.0)) * 1e-6
    cost += float(params.get("cost_ns_per_byte", 0.0)) * 1e-9 * len(payload)
    _emulate(started, cost, str(params.get("mode", "sleep")))
    return out


def apply_map(entry: TransformEntry, payload: bytes, params: Mapping, seed: int):
    return entry.fn(payload, params, seed)
