"""Worker daemon executing offloaded pipes.

The daemon's accept loop forks one child per connection; each child owns one
executor, so ``parallelism`` caps concurrent connections. Connections beyond
the cap get ``ERROR ResourceExhausted`` and are closed.
"""
from __future__ import annotations

import argparse
import importlib
import os
import queue
import signal
import socket
import subprocess
import sys
import threading
import time

from ..errors import BindFailure, ConnectionLost, FrameError, UnknownTransform, UnsupportedTopology
from ..runtime.execute import Bundle, StepError, run_bundle
from . import codec
from .protocol import (
    BUNDLE, BYE, ERROR, FRAME_NAMES, HEARTBEAT, HELLO, PROCESS, PROTOCOL_VERSION,
    RESULT, STATS, encode_frame, error_body, json_body, parse_json, read_frame,
)


def bind_socket(address: str) -> tuple:
    """Listening socket plus the concrete endpoint string for clients."""
    try:
        if address.startswith("unix:"):
            path = address[5:]
            if os.path.exists(path):
                os.unlink(path)
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.bind(path)
            endpoint = address
        else:
            host, _, port = address.rpartition(":")
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((host or "127.0.0.1", int(port)))
            endpoint = f"{host or '127.0.0.1'}:{sock.getsockname()[1]}"
        sock.listen(128)
    except (OSError, ValueError) as exc:
        raise BindFailure(f"cannot bind {address}: {exc}") from exc
    return sock, endpoint


class _Session:
    """One connection inside a forked child: a reader plus one executor thread."""

    def __init__(self, sock):
        self.sock = sock
        self.send_lock = threading.Lock()
        self.bundle = None
        self.work = queue.Queue()
        self.executed = 0
        self.lat_total = 0
        self.closed = threading.Event()

    def send(self, ftype, corr, body=b""):
        with self.send_lock:
            try:
                self.sock.sendall(encode_frame(ftype, corr, body))
            except OSError:
                self.closed.set()

    def error(self, corr, code, message, sample_id=None):
        self.send(ERROR, corr, error_body(code, message, sample_id))

    def run(self):
        executor = threading.Thread(target=self._execute, daemon=True)
        executor.start()
        try:
            while not self.closed.is_set():
                try:
                    ftype, corr, body = read_frame(self.sock)
                except FrameError as exc:
                    self.error(0, "FrameError", str(exc))
                    break
                except ConnectionLost:
                    break
                if not self._handle(ftype, corr, body):
                    break
        finally:
            self.closed.set()
            self.work.put(None)
            executor.join(timeout=5)
            try:
                self.sock.close()
            except OSError:
                pass

    def _handle(self, ftype, corr, body) -> bool:
        if ftype == HEARTBEAT:
            self.send(HEARTBEAT, corr)
        elif ftype == HELLO:
            try:
                parse_json(body) if body else {}
            except FrameError as exc:
                self.error(corr, "FrameError", str(exc))
                return True
            self.send(HELLO, corr, json_body({"version": PROTOCOL_VERSION, "pid": os.getpid()}))
        elif ftype == BUNDLE:
            try:
                bundle = Bundle.from_dict(parse_json(body))
                bundle.check()
            except UnknownTransform as exc:
                self.error(corr, "UnknownTransform", f"unknown transform {exc}")
                return True
            except (FrameError, UnsupportedTopology, KeyError, TypeError, ValueError, AttributeError) as exc:
                self.error(corr, "ProtocolViolation", f"bad bundle: {exc!r}")
                return True
            self.bundle = bundle
            self.send(BUNDLE, corr, json_body({"ok": True}))
        elif ftype == PROCESS:
            if self.bundle is None:
                self.error(corr, "ProtocolViolation", "PROCESS before BUNDLE")
            else:
                self.work.put((corr, body))
        elif ftype == STATS:
            if body:
                self.error(corr, "ProtocolViolation", "STATS request must have an empty body")
            else:
                mean = self.lat_total / self.executed if self.executed else 0.0
                self.send(STATS, corr, json_body({"queue_depth": self.work.qsize(),
                                                  "executed": self.executed,
                                                  "mean_latency_ns": mean}))
        elif ftype == BYE:
            return False
        elif ftype in FRAME_NAMES:
            self.error(corr, "ProtocolViolation", f"unexpected {FRAME_NAMES[ftype]} frame from driver")
        else:
            self.error(corr, "UnknownFrameType", f"frame type {ftype} is not defined")
        return True

    def _execute(self):
        while True:
            item = self.work.get()
            if item is None:
                return
            corr, body = item
            try:
                sample = codec.decode_sample(body)
            except FrameError as exc:
                self.error(corr, "FrameError", str(exc))
                continue
            t0 = time.perf_counter_ns()
            try:
                out = run_bundle(sample, self.bundle)
            except StepError as exc:
                self.error(corr, "TransformError", f"{exc.pipe_id}|{exc.cause}", sample.sample_id)
                continue
            except Exception as exc:  # keep the session alive on any bundle bug
                self.error(corr, "TransformError", f"{self.bundle.report_id}|{exc!r}", sample.sample_id)
                continue
            self.lat_total += time.perf_counter_ns() - t0
            self.executed += 1
            self.send(RESULT, corr, codec.encode_results(out))


def _reap(children: set) -> None:
    for pid in list(children):
        try:
            done, _ = os.waitpid(pid, os.WNOHANG)
        except ChildProcessError:
            done = pid
        if done:
            children.discard(pid)


def serve(address: str, parallelism: int = 1, ready=None, parent: int = None) -> None:
    """Run the daemon until SIGTERM/SIGINT. ``ready(endpoint)`` is called once bound.

    With ``parent`` set, the daemon also stops once that process is gone.
    """
    listener, endpoint = bind_socket(address)
    listener.settimeout(1.0)  # wake up to reap executors and watch the parent
    children: set = set()
    stopping = []

    def stop(*_):
        stopping.append(True)
        try:
            listener.close()
        except OSError:
            pass

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    if ready:
        ready(endpoint)
    while not stopping:
        try:
            conn, _ = listener.accept()
        except socket.timeout:
            _reap(children)
            if parent is not None and os.getppid() != parent:
                break
            continue
        except OSError:
            if stopping:
                break
            continue
        conn.settimeout(None)
        _reap(children)
        # a child whose driver just said BYE may still be exiting
        deadline = time.monotonic() + 0.5
        while len(children) >= parallelism and time.monotonic() < deadline:
            time.sleep(0.01)
            _reap(children)
        if len(children) >= parallelism:
            try:
                conn.sendall(encode_frame(ERROR, 0, error_body(
                    "ResourceExhausted", f"worker runs at most {parallelism} executors")))
            except OSError:
                pass
            conn.close()
            continue
        pid = os.fork()
        if pid == 0:
            code = 0
            try:
                listener.close()
                signal.signal(signal.SIGTERM, signal.SIG_DFL)
                signal.signal(signal.SIGINT, signal.SIG_DFL)
                _Session(conn).run()
            except BaseException:
                code = 1
            finally:
                os._exit(code)
        conn.close()
        children.add(pid)
    for pid in children:
        try:
            os.kill(pid, signal.SIGTERM)
        except ProcessLookupError:
            pass
    if address.startswith("unix:"):
        try:
            os.unlink(address[5:])
        except OSError:
            pass


class WorkerProcess:
    """A daemon started as a subprocess, e.g. the local pool or a test fixture."""

    def __init__(self, address: str = "127.0.0.1:0", parallelism: int = 1, imports=(),
                 startup_timeout: float = 30.0):
        cmd = [sys.executable, "-m", "sluice.remote.worker", "--bind", address,
               "--parallelism", str(parallelism), "--parent", str(os.getpid())]
        for mod in imports:
            cmd += ["--import", mod]
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join([p for p in sys.path if p] + [env.get("PYTHONPATH", "")])
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, env=env)
        self.parallelism = parallelism
        line = self._read_line(startup_timeout)
        if not line.startswith("LISTENING "):
            self.stop()
            raise BindFailure(f"worker failed to start on {address}: {line!r}")
        self.endpoint = line.split(" ", 1)[1].strip()

    def _read_line(self, timeout: float) -> str:
        box = []
        t = threading.Thread(target=lambda: box.append(self.proc.stdout.readline().decode()), daemon=True)
        t.start()
        t.join(timeout)
        return box[0] if box else ""

    @property
    def pid(self) -> int:
        return self.proc.pid

    def alive(self) -> bool:
        return self.proc.poll() is None

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sluice-worker")
    ap.add_argument("--bind", required=True)
    ap.add_argument("--parallelism", type=int, default=1)
    ap.add_argument("--import", dest="imports", action="append", default=[])
    ap.add_argument("--parent", type=int, default=None, help="exit when this process id is gone")
    args = ap.parse_args(argv)
    for mod in args.imports:
        importlib.import_module(mod)

    def ready(endpoint):
        print(f"LISTENING {endpoint}", flush=True)

    try:
        serve(args.bind, args.parallelism, ready, args.parent)
    except BindFailure as exc:
        print(f"ERROR {exc}", flush=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
