"""Shared builders for tests: stats fixtures, small pipelines, fault injection."""
from __future__ import annotations

import os
import random
import signal
import socket
import threading

from sluice.graph import Step, SyntheticSource, attach_source, compose
from sluice.runtime.dataset import DataSet, RuntimeConfig
from sluice.telemetry import MetadataStore


def stats_for(graph, lat, size_in=None, size_out=None, tput_base=100.0, size_raw=None, tput_v=None):
    """A MetadataStore with one observation per field.

    ``lat``, ``size_in`` and ``size_out`` map node id to a value; ``tput_v``
    maps node id to ``{variant: samples/s}``.
    """
    st = MetadataStore()
    st.register_graph(graph)
    for nid, v in lat.items():
        st.put(nid, lat_base=v)
    for nid, v in (size_in or {}).items():
        st.put(nid, size_in=v)
    for nid, v in (size_out or {}).items():
        st.put(nid, size_out=v)
    for nid, m in (tput_v or {}).items():
        st.put(nid, tput_v=m)
    st.tput_base = tput_base
    if size_raw is not None:
        st.size_raw = size_raw
    return st


def chain(*steps, n=256, size=64, split_size=16, seed=0, tagged=False):
    g = compose([s if isinstance(s, Step) else Step.of(s) for s in steps])
    return attach_source(g, SyntheticSource(n, size=size, seed=seed, split_size=split_size, tagged=tagged))


def epoch_ids(ds) -> list:
    return [i for b in ds for i in b.ids]


def epoch_payloads(ds) -> dict:
    out = {}
    for b in ds:
        for s in b.samples:
            assert s.sample_id not in out
            out[s.sample_id] = s.payload
    return out


def run_local(graph, **cfg) -> dict:
    with DataSet(graph, config=RuntimeConfig(**cfg)) as ds:
        return epoch_payloads(ds)


def children_of(pid: int) -> list:
    """Direct child pids (Linux /proc)."""
    out = []
    try:
        for tid in os.listdir(f"/proc/{pid}/task"):
            with open(f"/proc/{pid}/task/{tid}/children") as fh:
                out.extend(int(x) for x in fh.read().split())
    except OSError:
        pass
    return out


def kill_executors(worker, rng: random.Random, count: int = 1) -> int:
    """SIGKILL up to ``count`` connection processes of a worker daemon."""
    kids = children_of(worker.pid)
    rng.shuffle(kids)
    killed = 0
    for pid in kids[:count]:
        try:
            os.kill(pid, signal.SIGKILL)
            killed += 1
        except ProcessLookupError:
            pass
    return killed


class FlakyProxy:
    """TCP relay in front of a worker whose connections can be cut on demand."""

    def __init__(self, upstream: str):
        host, _, port = upstream.rpartition(":")
        self.upstream = (host, int(port))
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(128)
        self.endpoint = f"127.0.0.1:{self.listener.getsockname()[1]}"
        self._lock = threading.Lock()
        self._pairs: list = []
        self._closed = False
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while True:
            try:
                client, _ = self.listener.accept()
            except OSError:
                return
            try:
                server = socket.create_connection(self.upstream)
            except OSError:
                client.close()
                continue
            with self._lock:
                if self._closed:
                    client.close()
                    server.close()
                    return
                self._pairs.append((client, server))
            threading.Thread(target=self._pump, args=(client, server), daemon=True).start()
            threading.Thread(target=self._pump, args=(server, client), daemon=True).start()

    @staticmethod
    def _pump(src, dst):
        try:
            while True:
                data = src.recv(65536)
                if not data:
                    break
                dst.sendall(data)
        except OSError:
            pass
        for s in (src, dst):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def drop(self, rng: random.Random = None, count: int = None) -> int:
        """Cut ``count`` live connections (all when None)."""
        with self._lock:
            pairs = list(self._pairs)
            if rng is not None:
                rng.shuffle(pairs)
            victims = pairs if count is None else pairs[:count]
            for p in victims:
                self._pairs.remove(p)
        for c, s in victims:
            for sock in (c, s):
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()
        return len(victims)

    def close(self):
        with self._lock:
            self._closed = True
        self.listener.close()
        self.drop()


# protocol fuzzing ------------------------------------------------------------

PROBE = 0xFEEDF00D


def _fuzz_body(rng: random.Random, valid_bundle: bytes, valid_sample: bytes) -> tuple:
    from sluice.remote import protocol as P

    roll = rng.random()
    if roll < 0.25:
        return rng.choice([P.PROCESS, P.RESULT, P.ERROR]), _mutate(rng, valid_sample)
    if roll < 0.4:
        return P.BUNDLE, _mutate(rng, valid_bundle)
    if roll < 0.5:
        junk = rng.choice([[], 3, "x", {"pipe_id": "a"}, {"members": [[1, {"name": "nope"}]]},
                           {"pipe_id": 1, "members": [[1, {"name": "flip", "params": [], "kind": "map"}]]}])
        return rng.choice([P.HELLO, P.BUNDLE, P.STATS]), P.json_body(junk)
    if roll < 0.6:
        return rng.choice([P.HELLO, P.STATS, P.HEARTBEAT]), b""
    ftype = rng.choice([0, 9, 10, 77, 255, P.HELLO, P.PROCESS, P.STATS])
    return ftype, rng.randbytes(rng.randint(0, 64))


def _mutate(rng: random.Random, data: bytes) -> bytes:
    b = bytearray(data)
    for _ in range(rng.randint(1, 6)):
        op = rng.random()
        if op < 0.5 and b:
            b[rng.randrange(len(b))] = rng.randrange(256)
        elif op < 0.75 and b:
            del b[rng.randrange(len(b)):]
        else:
            b[rng.randrange(len(b) + 1):0] = rng.randbytes(rng.randint(1, 8))
    return bytes(b)


def fuzz_worker(endpoint: str, rng: random.Random, frames: int, per_conn: int = 40) -> dict:
    """Send ``frames`` random frames; each connection ends with a HEARTBEAT probe.

    Returns counts of sessions that answered the probe, that closed for a
    legitimate reason (BYE or an oversized length header), and that died
    otherwise (``crashed``).
    """
    from sluice.graph.sample import DataSample
    from sluice.graph.model import TransformSpec
    from sluice.remote import codec, protocol as P
    from sluice.runtime.execute import Bundle

    bundle = P.json_body(Bundle(1, ((1, TransformSpec.make("flip")), (2, TransformSpec.make("truncate", max_len=8))))
                         .to_dict())
    sample = codec.encode_sample(DataSample((0, 3), 0, b"abcdefgh" * 4, trace=[]))
    out = {"answered": 0, "closed": 0, "crashed": 0, "frames": 0}
    sent = 0
    while sent < frames:
        sock = P.connect(endpoint)
        sock.settimeout(10)
        legit_close = False
        try:
            n = min(per_conn, frames - sent)
            wire = bytearray()
            if rng.random() < 0.7:
                wire += P.encode_frame(P.HELLO, 1, P.json_body({"version": 1, "role": "driver"}))
                wire += P.encode_frame(P.BUNDLE, 2, bundle)
            for _ in range(n):
                sent += 1
                r = rng.random()
                if r < 0.0025:
                    wire += P.HEADER.pack(P.MAX_BODY + rng.randint(1, 1 << 20), P.PROCESS, 0)
                    legit_close = True
                    break
                if r < 0.005:
                    wire += P.encode_frame(P.BYE, rng.getrandbits(64))
                    legit_close = True
                    break
                ftype, body = _fuzz_body(rng, bundle, sample)
                wire += P.encode_frame(ftype, rng.getrandbits(64), body)
            wire += P.encode_frame(P.HEARTBEAT, PROBE)
            try:
                sock.sendall(wire)
            except OSError:
                pass
            answered = False
            try:
                while True:
                    ftype, corr, _ = P.read_frame(sock, max_body=P.MAX_BODY)
                    if ftype == P.HEARTBEAT and corr == PROBE:
                        answered = True
                        break
            except Exception:
                pass
            if answered:
                out["answered"] += 1
            elif legit_close:
                out["closed"] += 1
            else:
                out["crashed"] += 1
        finally:
            try:
                sock.sendall(P.encode_frame(P.BYE, 0))
            except OSError:
                pass
            sock.close()
    out["frames"] = sent
    return out


# local vs remote -------------------------------------------------------------

TRANSFORM_PARAMS = {
    "synthetic": {"cost_us": 0, "size_factor": 1.5, "random": True},
    "fail_on": {"marker": "!!"},
    "truncate": {"max_len": 40},
    "drop_random": {"p": 0.5},
    "chunk": {"parts": 3},
    "crop": {"frac": 0.5, "random": True},
    "flip": {"random": True},
}


def random_payload(rng: random.Random) -> bytes:
    return rng.randbytes(rng.choice([0, 1, 3, 16, 64, 255, 300]) + rng.randint(0, 8))


def compare_remote_local(endpoint: str, name: str, payloads, seed: int = 7, epoch: int = 2) -> list:
    """Mismatches between the worker's output and local execution of one transform.

    Each element is ``(index, local, remote)``; failures compare by kind.
    """
    from sluice.graph.model import TransformSpec

    return compare_bundle(endpoint, [TransformSpec.make(name, **TRANSFORM_PARAMS.get(name, {}))], payloads,
                          seed, epoch)


def compare_bundle(endpoint: str, specs, payloads, seed: int = 7, epoch: int = 2) -> list:
    """Like ``compare_remote_local`` for a chain of transforms run as one fused bundle."""
    from sluice.graph.sample import DataSample
    from sluice.remote.connection import Connection, RemoteFailure, offload_batch
    from sluice.runtime.execute import Bundle, StepError, run_bundle

    steps = tuple((5 + i, spec) for i, spec in enumerate(specs))
    bundle = Bundle(5, steps, seed, epoch, "remote_pool:1")
    samples = [DataSample((0, i), i // 16, p) for i, p in enumerate(payloads)]
    local = {}
    for s in samples:
        try:
            local[s.sample_id] = [(o.sample_id, o.part, o.tombstone, o.payload, o.meta)
                                  for o in run_bundle(s, bundle)]
        except StepError:
            local[s.sample_id] = "error"
    conn = Connection(endpoint, bundle)
    try:
        remote = {}
        for sid, out in offload_batch(conn, samples):
            remote[sid] = "error" if isinstance(out, RemoteFailure) else \
                [(o.sample_id, o.part, o.tombstone, o.payload, o.meta) for o in out]
    finally:
        conn.close()
    return [(sid, local[sid], remote.get(sid)) for sid in local if local[sid] != remote.get(sid)]
