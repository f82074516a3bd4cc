"""Deterministic binary encoding of DataSample.

Layout: one version byte (1), then tagged fields in ascending tag order;
absent optional fields are omitted. All integers are big-endian.

    tag  field       content
    1    sample_id   i64 source, i64 seq
    2    split_id    i64
    3    payload     u32 length, bytes
    4    meta        u16 count, then per key (sorted): u16 length, utf-8 key, value
    5    trace       u32 count, then per record: i32 pipe, u64 latency_ns, u64 bytes_in,
                     u64 bytes_out, u16 length + utf-8 variant key, i64 buffer_len (-1 = none)
    6    tombstone   no content (present means true)
    7    part        u32 index, u32 count
    8    members     u32 count, then per member: i64 source, i64 seq, u8 has_part [, u32, u32]

Meta values: u8 type then 0 none | 1 bool (u8) | 2 int (i64) | 3 float (f64) |
4 str (u32 length, utf-8) | 5 bytes (u32 length).
"""
from __future__ import annotations

import struct

from ..errors import FrameError
from ..graph.sample import DataSample, Member
from ..telemetry import TraceRecord

CODEC_VERSION = 1

_Q2 = struct.Struct(">qq")
_Q = struct.Struct(">q")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")
_I2 = struct.Struct(">II")
_REC = struct.Struct(">iQQQ")


def _value(v) -> bytes:
    if v is None:
        return b"\x00"
    if isinstance(v, bool):
        return b"\x01" + bytes([v])
    if isinstance(v, int):
        return b"\x02" + _Q.pack(v)
    if isinstance(v, float):
        return b"\x03" + struct.pack(">d", v)
    if isinstance(v, str):
        raw = v.encode()
        return b"\x04" + _U32.pack(len(raw)) + raw
    if isinstance(v, (bytes, bytearray)):
        return b"\x05" + _U32.pack(len(v)) + bytes(v)
    raise TypeError(f"meta value {v!r} is not a scalar")


def encode_sample(s: DataSample) -> bytes:
    out = [bytes([CODEC_VERSION]), b"\x01", _Q2.pack(*s.sample_id), b"\x02", _Q.pack(s.split_id)]
    out += [b"\x03", _U32.pack(len(s.payload)), bytes(s.payload)]
    if s.meta:
        out += [b"\x04", _U16.pack(len(s.meta))]
        for k in sorted(s.meta):
            kb = k.encode()
            out += [_U16.pack(len(kb)), kb, _value(s.meta[k])]
    if s.trace is not None:
        out += [b"\x05", _U32.pack(len(s.trace))]
        for r in s.trace:
            vb = r.variant.encode()
            out += [_REC.pack(r.pipe_id, r.latency_ns, r.bytes_in, r.bytes_out),
                    _U16.pack(len(vb)), vb, _Q.pack(-1 if r.buffer_len is None else r.buffer_len)]
    if s.tombstone:
        out.append(b"\x06")
    if s.part is not None:
        out += [b"\x07", _I2.pack(*s.part)]
    if s.members is not None:
        out += [b"\x08", _U32.pack(len(s.members))]
        for m in s.members:
            out.append(_Q2.pack(*m.sample_id))
            out += [b"\x01", _I2.pack(*m.part)] if m.part is not None else [b"\x00"]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FrameError("truncated sample encoding")
        chunk = self.buf[self.pos:self.pos + n].tobytes()
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def done(self) -> bool:
        return self.pos >= len(self.buf)


def _read_value(r: _Reader):
    t = r.take(1)[0]
    if t == 0:
        return None
    if t == 1:
        return bool(r.take(1)[0])
    if t == 2:
        return r.unpack(_Q)[0]
    if t == 3:
        return struct.unpack(">d", r.take(8))[0]
    if t == 4:
        return r.take(r.unpack(_U32)[0]).decode()
    if t == 5:
        return r.take(r.unpack(_U32)[0])
    raise FrameError(f"unknown meta value type {t}")


def decode_sample(buf: bytes) -> DataSample:
    try:
        return _decode(buf)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FrameError(f"bad sample encoding: {exc}") from exc


def _decode(buf: bytes) -> DataSample:
    r = _Reader(buf)
    if r.take(1)[0] != CODEC_VERSION:
        raise FrameError("unsupported sample codec version")
    fields = {}
    last = 0
    while not r.done():
        tag = r.take(1)[0]
        if tag <= last:
            raise FrameError("sample fields out of order")
        last = tag
        if tag == 1:
            fields["sample_id"] = r.unpack(_Q2)
        elif tag == 2:
            fields["split_id"] = r.unpack(_Q)[0]
        elif tag == 3:
            fields["payload"] = r.take(r.unpack(_U32)[0])
        elif tag == 4:
            meta = {}
            for _ in range(r.unpack(_U16)[0]):
                key = r.take(r.unpack(_U16)[0]).decode()
                meta[key] = _read_value(r)
            fields["meta"] = meta
        elif tag == 5:
            trace = []
            for _ in range(r.unpack(_U32)[0]):
                pid, lat, bin_, bout = r.unpack(_REC)
                variant = r.take(r.unpack(_U16)[0]).decode()
                blen = r.unpack(_Q)[0]
                trace.append(TraceRecord(pid, lat, bin_, bout, variant, None if blen < 0 else blen))
            fields["trace"] = trace
        elif tag == 6:
            fields["tombstone"] = True
        elif tag == 7:
            fields["part"] = r.unpack(_I2)
        elif tag == 8:
            members = []
            for _ in range(r.unpack(_U32)[0]):
                sid = r.unpack(_Q2)
                part = r.unpack(_I2) if r.take(1)[0] else None
                members.append(Member(sid, part))
            fields["members"] = tuple(members)
        else:
            raise FrameError(f"unknown sample field tag {tag}")
    if "sample_id" not in fields or "split_id" not in fields:
        raise FrameError("sample encoding lacks identity fields")
    return DataSample(**fields)


def encode_results(samples) -> bytes:
    out = [_U32.pack(len(samples))]
    for s in samples:
        raw = encode_sample(s)
        out += [_U32.pack(len(raw)), raw]
    return b"".join(out)


def decode_results(body: bytes) -> list:
    r = _Reader(body)
    try:
        samples = [decode_sample(r.take(r.unpack(_U32)[0])) for _ in range(r.unpack(_U32)[0])]
    except struct.error as exc:
        raise FrameError(str(exc)) from exc
    if not r.done():
        raise FrameError("trailing bytes after results")
    return samples
