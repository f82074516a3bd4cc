"""Driver-side connections to worker daemons."""
from __future__ import annotations

import itertools
import os
import threading
import time
from typing import Callable, Optional

from ..errors import ConnectionLost, FrameError, ProtocolViolation, ResourceExhausted, UnknownTransform
from . import codec
from .protocol import (
    BUNDLE, BYE, ERROR, HEARTBEAT, HELLO, PROCESS, PROTOCOL_VERSION, RESULT, STATS, connect,
    encode_frame, json_body, parse_json, read_frame,
)

DEFAULT_HEARTBEAT_INTERVAL = 1.0
DEFAULT_HEARTBEAT_TIMEOUT = 5.0
OUTSTANDING_PER_CONNECTION = 4


class Link:
    """Emulated network between one driver and one endpoint.

    Transfers in each direction are serialized and take ``overhead + bytes /
    bandwidth`` seconds; with no bandwidth set, transfers are free.
    """

    def __init__(self, bandwidth: Optional[float] = None, overhead_us: float = 0.0):
        self.bandwidth = bandwidth
        self.overhead = overhead_us * 1e-6
        self._tx = threading.Lock()
        self._rx = threading.Lock()

    def _wait(self, lock, nbytes):
        if not self.bandwidth and not self.overhead:
            return
        with lock:
            t = self.overhead + (nbytes / self.bandwidth if self.bandwidth else 0.0)
            if t > 0:
                time.sleep(t)

    def send(self, nbytes: int) -> None:
        self._wait(self._tx, nbytes)

    def receive(self, nbytes: int) -> None:
        self._wait(self._rx, nbytes)


_LINKS: dict = {}
_LINKS_LOCK = threading.Lock()


def link_for(endpoint: str, bandwidth=None, overhead_us=0.0) -> Link:
    """The process-wide link to ``endpoint`` (one per driver process)."""
    key = (os.getpid(), endpoint, bandwidth, overhead_us)
    with _LINKS_LOCK:
        if key not in _LINKS:
            _LINKS[key] = Link(bandwidth, overhead_us)
        return _LINKS[key]


class RemoteFailure(Exception):
    def __init__(self, code: str, message: str, sample_id=None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.sample_id = tuple(sample_id) if sample_id else None


def _raise_error(body: bytes):
    info = parse_json(body)
    code, msg = info.get("code", "Error"), info.get("message", "")
    if code == "ResourceExhausted":
        raise ResourceExhausted(msg)
    if code == "UnknownTransform":
        raise UnknownTransform(msg)
    if code == "ProtocolViolation":
        raise ProtocolViolation(msg)
    raise RemoteFailure(code, msg, info.get("sample_id"))


class Connection:
    """One handshaken connection with a receiver thread and a heartbeat watchdog.

    ``on_result(token, samples)``, ``on_error(token, RemoteFailure)`` and
    ``on_lost(token)`` are invoked from the receiver thread; ``on_lost`` fires
    once per outstanding request when the connection dies or is closed with
    requests still pending.
    """

    def __init__(self, endpoint: str, bundle=None, *, on_result: Callable = None,
                 on_error: Callable = None, on_lost: Callable = None, link: Optional[Link] = None,
                 heartbeat_interval: float = DEFAULT_HEARTBEAT_INTERVAL,
                 heartbeat_timeout: float = DEFAULT_HEARTBEAT_TIMEOUT,
                 max_outstanding: int = OUTSTANDING_PER_CONNECTION, connect_timeout: float = 5.0):
        self.endpoint = endpoint
        self.link = link or Link()
        self.on_result = on_result or (lambda t, s: None)
        self.on_error = on_error or (lambda t, e: None)
        self.on_lost = on_lost or (lambda t: None)
        self.hb_interval = heartbeat_interval
        self.hb_timeout = heartbeat_timeout
        self.max_outstanding = max_outstanding
        self.sock = connect(endpoint, connect_timeout)
        self._corr = itertools.count(1)
        self._send_lock = threading.Lock()
        self._cv = threading.Condition()
        self.pending: dict = {}
        self._replies: dict = {}
        self.dead = False
        self.closing = False
        self.last_seen = time.monotonic()
        try:
            self.sock.settimeout(connect_timeout)
            hello = self._call(HELLO, json_body({"version": PROTOCOL_VERSION, "role": "driver"}))
            self.worker_pid = parse_json(hello).get("pid")
            if bundle is not None:
                self._call(BUNDLE, json_body(bundle.to_dict()))
            self.sock.settimeout(None)
        except BaseException:
            self._close_socket()
            raise
        self._rx = threading.Thread(target=self._receive, name=f"rx-{endpoint}", daemon=True)
        self._rx.start()
        self._hb = threading.Thread(target=self._heartbeat, name=f"hb-{endpoint}", daemon=True)
        self._hb.start()

    # synchronous handshake before the receiver starts
    def _call(self, ftype, body=b""):
        corr = next(self._corr)
        self._send(ftype, corr, body)
        try:
            rtype, rcorr, rbody = read_frame(self.sock)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc
        if rtype == ERROR:
            _raise_error(rbody)
        if rtype != ftype:
            raise ProtocolViolation(f"expected reply type {ftype}, got {rtype}")
        return rbody

    def _send(self, ftype, corr, body=b""):
        frame = encode_frame(ftype, corr, body)
        with self._send_lock:
            if ftype == PROCESS:
                self.link.send(len(frame))
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise ConnectionLost(str(exc)) from exc

    @property
    def outstanding(self) -> int:
        return len(self.pending)

    def has_capacity(self) -> bool:
        return not self.dead and not self.closing and len(self.pending) < self.max_outstanding

    def submit(self, sample, token=None) -> int:
        """Send one PROCESS frame; the reply is delivered through the callbacks."""
        if self.dead:
            raise ConnectionLost(f"connection to {self.endpoint} is down")
        corr = next(self._corr)
        with self._cv:
            self.pending[corr] = token if token is not None else sample
        try:
            self._send(PROCESS, corr, codec.encode_sample(sample))
        except ConnectionLost:
            self._die()
        return corr

    def report_stats(self, timeout: float = 5.0) -> dict:
        corr = next(self._corr)
        with self._cv:
            self._replies[corr] = None
        self._send(STATS, corr)
        deadline = time.monotonic() + timeout
        with self._cv:
            while self._replies.get(corr) is None:
                if self.dead:
                    raise ConnectionLost(f"connection to {self.endpoint} is down")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise ConnectionLost("STATS reply timed out")
                self._cv.wait(left)
            kind, body = self._replies.pop(corr)
        if kind == ERROR:
            _raise_error(body)
        return parse_json(body)

    def _receive(self):
        try:
            while True:
                ftype, corr, body = read_frame(self.sock)
                self.last_seen = time.monotonic()
                if ftype == HEARTBEAT:
                    continue
                if ftype == RESULT:
                    self.link.receive(len(body) + 13)
                    samples = codec.decode_results(body)
                    with self._cv:
                        token = self.pending.pop(corr, None)
                        self._cv.notify_all()
                    if token is not None:
                        self.on_result(token, samples)
                elif ftype == ERROR:
                    with self._cv:
                        if corr in self._replies:
                            self._replies[corr] = (ERROR, body)
                            self._cv.notify_all()
                            continue
                        token = self.pending.pop(corr, None)
                        self._cv.notify_all()
                    if token is not None:
                        info = parse_json(body)
                        self.on_error(token, RemoteFailure(info.get("code", "Error"), info.get("message", ""),
                                                           info.get("sample_id")))
                elif ftype == STATS:
                    with self._cv:
                        self._replies[corr] = (STATS, body)
                        self._cv.notify_all()
        except (ConnectionLost, FrameError, OSError, ValueError):
            pass
        self._die()

    def _heartbeat(self):
        while not self.dead and not self.closing:
            time.sleep(self.hb_interval / 2)
            if self.dead or self.closing:
                return
            if time.monotonic() - self.last_seen > self.hb_timeout:
                self._die()
                return
            try:
                self._send(HEARTBEAT, 0)
            except ConnectionLost:
                self._die()
                return

    def _die(self):
        with self._cv:
            if self.dead:
                return
            self.dead = True
            lost = list(self.pending.values())
            self.pending.clear()
            self._cv.notify_all()
        self._close_socket()
        for token in lost:
            self.on_lost(token)

    def _close_socket(self):
        try:
            self.sock.shutdown(2)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def wait_drained(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._cv:
            while self.pending and not self.dead:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cv.wait(left)
        return True

    def close(self) -> None:
        if self.dead:
            return
        self.closing = True
        try:
            self._send(BYE, 0)
        except ConnectionLost:
            pass
        self._die()


def offload_batch(conn: Connection, samples, timeout: float = 30.0) -> list:
    """Submit ``samples`` and wait for every reply.

    Returns ``[(sample_id, outputs or RemoteFailure)]`` in arrival order.
    Raises ConnectionLost if the connection dies with requests outstanding.
    """
    samples = list(samples)
    if not samples:
        return []
    results, lost = [], []
    done = threading.Condition()
    prev = (conn.on_result, conn.on_error, conn.on_lost)

    def ok(token, out):
        with done:
            results.append((token.sample_id, out))
            done.notify_all()

    def err(token, exc):
        with done:
            results.append((token.sample_id, exc))
            done.notify_all()

    def gone(token):
        with done:
            lost.append(token)
            done.notify_all()

    conn.on_result, conn.on_error, conn.on_lost = ok, err, gone
    try:
        queue = list(samples)
        deadline = time.monotonic() + timeout
        with done:
            while len(results) + len(lost) < len(samples):
                while queue and conn.has_capacity():
                    s = queue.pop(0)
                    done.release()
                    try:
                        conn.submit(s, s)
                    finally:
                        done.acquire()
                if conn.dead and len(results) + len(lost) < len(samples):
                    lost.extend(queue)
                    queue.clear()
                    break
                left = deadline - time.monotonic()
                if left <= 0:
                    raise ConnectionLost("offload_batch timed out")
                done.wait(min(left, 0.05))
    finally:
        conn.on_result, conn.on_error, conn.on_lost = prev
    if lost:
        raise ConnectionLost(f"{len(lost)} samples outstanding when the connection dropped")
    return results
