"""Framed wire protocol.

Every frame is::

    offset  size  field
    0       4     body length L, unsigned big-endian (excludes this 13-byte header)
    4       1     frame type
    5       8     correlation id, unsigned big-endian
    13      L     body

Frame types and bodies:

    1 HELLO      JSON {"version": 1, "role": "driver"}; reply HELLO {"version", "pid"}
    2 BUNDLE     JSON {"pipe_id", "members": [[id, spec-dict], ...], "seed", "epoch",
                       "variant"}; reply BUNDLE {"ok": true}
    3 PROCESS    one encoded DataSample (see codec); correlation id chosen by the driver
    4 RESULT     u32 count, then count x (u32 length + encoded DataSample)
    5 ERROR      JSON {"code": str, "message": str, "sample_id": [src, seq] | null}
    6 STATS      request: empty body; reply JSON {"queue_depth", "executed", "mean_latency_ns"}
    7 HEARTBEAT  empty body, echoed with the same correlation id
    8 BYE        empty body; the peer closes the connection

A RESULT or ERROR reply carries the correlation id of the frame it answers.
"""
from __future__ import annotations

import json
import socket
import struct

from ..errors import ConnectionLost, FrameError

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IBQ")
MAX_BODY = 64 << 20

HELLO, BUNDLE, PROCESS, RESULT, ERROR, STATS, HEARTBEAT, BYE = range(1, 9)
FRAME_NAMES = {HELLO: "HELLO", BUNDLE: "BUNDLE", PROCESS: "PROCESS", RESULT: "RESULT",
               ERROR: "ERROR", STATS: "STATS", HEARTBEAT: "HEARTBEAT", BYE: "BYE"}


def encode_frame(ftype: int, corr: int, body: bytes = b"") -> bytes:
    return HEADER.pack(len(body), ftype, corr) + body


def json_body(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def parse_json(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise FrameError(f"malformed JSON body: {exc}") from exc
    if not isinstance(obj, dict):
        raise FrameError("JSON body must be an object")
    return obj


def error_body(code: str, message: str, sample_id=None) -> bytes:
    return json_body({"code": code, "message": message,
                      "sample_id": list(sample_id) if sample_id is not None else None})


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc
        if not chunk:
            raise ConnectionLost("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_body: int = MAX_BODY) -> tuple:
    """Block for one frame; returns ``(type, corr, body)``.

    Raises ConnectionLost on EOF and FrameError when the length exceeds
    ``max_body`` (the stream cannot be resynchronized after that).
    """
    length, ftype, corr = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > max_body:
        raise FrameError(f"frame body of {length} bytes exceeds {max_body}")
    body = _recv_exact(sock, length) if length else b""
    return ftype, corr, body


def connect(endpoint: str, timeout: float = 5.0) -> socket.socket:
    """``host:port`` over TCP or ``unix:/path`` over a Unix socket."""
    if endpoint.startswith("unix:"):
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        target = endpoint[5:]
    else:
        host, _, port = endpoint.rpartition(":")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        target = (host or "127.0.0.1", int(port))
    sock.settimeout(timeout)
    try:
        sock.connect(target)
    except OSError as exc:
        sock.close()
        raise ConnectionLost(f"cannot reach {endpoint}: {exc}") from exc
    sock.settimeout(None)
    return sock
