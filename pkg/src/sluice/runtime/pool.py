"""A set of worker connections serving one pooled stage inside one driver."""
from __future__ import annotations

import threading
import time

from ..errors import BackendUnavailable, ConnectionLost, ResourceExhausted
from ..remote.connection import Connection, RemoteFailure


class Pool:
    """``parallelism`` connections to ``endpoint``, each executing ``bundle``.

    Results, worker errors and lost requests are reported through
    ``on_result(sample, outputs)``, ``on_error(sample, RemoteFailure)`` and
    ``on_lost(sample)``. Dead connections are replaced with exponential
    backoff; if none can be re-established within ``reconnect_timeout`` the
    pool fails with BackendUnavailable.
    """

    def __init__(self, endpoint, bundle, parallelism, *, on_result, on_error, on_lost, link=None,
                 heartbeat_interval=1.0, heartbeat_timeout=5.0, reconnect_timeout=10.0):
        self.endpoint = endpoint
        self.bundle = bundle
        self.link = link
        self.hb = (heartbeat_interval, heartbeat_timeout)
        self.reconnect_timeout = reconnect_timeout
        self._cb = (on_result, on_error, on_lost)
        self._cv = threading.Condition()
        self.conns: list = []
        self.target = 0
        self.error = None
        self._retry_at = 0.0
        self._backoff = 0.05
        self._down_since = None
        self._retiring: list = []
        try:
            self.resize(parallelism)
        except BaseException:
            self.close()
            raise

    def _open(self) -> Connection:
        on_result, on_error, on_lost = self._cb

        def result(tok, out):
            on_result(tok, out)
            self._notify()

        def error(tok, exc):
            on_error(tok, exc)
            self._notify()

        def lost(tok):
            on_lost(tok)
            self._notify()

        try:
            return Connection(self.endpoint, self.bundle, on_result=result, on_error=error, on_lost=lost,
                              link=self.link, heartbeat_interval=self.hb[0], heartbeat_timeout=self.hb[1])
        except ResourceExhausted:
            raise
        except (ConnectionLost, OSError) as exc:
            raise BackendUnavailable(f"cannot reach worker at {self.endpoint}: {exc}") from exc
        except RemoteFailure as exc:
            raise BackendUnavailable(f"worker at {self.endpoint} refused the bundle: {exc}") from exc

    def _notify(self):
        with self._cv:
            self._cv.notify_all()

    @property
    def parallelism(self) -> int:
        return self.target

    def live(self) -> list:
        return [c for c in self.conns if not c.dead]

    def resize(self, n: int) -> None:
        """Open or retire connections; retiring ones finish their requests first."""
        with self._cv:
            self.conns = self.live()
            while len(self.conns) < n:
                self.conns.append(self._open())
            while len(self.conns) > n:
                c = min(self.conns, key=lambda c: c.outstanding)
                self.conns.remove(c)
                self._retiring.append(c)
                threading.Thread(target=self._retire, args=(c,), daemon=True).start()
            self.target = n

    def _retire(self, conn, timeout=30.0):
        conn.wait_drained(timeout)
        conn.close()

    def _heal(self) -> None:
        """Replace dead connections; called with the lock held."""
        dead = [c for c in self.conns if c.dead]
        if dead:
            self.conns = [c for c in self.conns if not c.dead]
        missing = self.target - len(self.conns)
        if missing <= 0:
            self._down_since = None
            return
        now = time.monotonic()
        if self._down_since is None:
            self._down_since = now
        if now < self._retry_at:
            return
        try:
            for _ in range(missing):
                self.conns.append(self._open())
            self._backoff = 0.05
            self._down_since = None
        except (BackendUnavailable, ResourceExhausted) as exc:
            self._retry_at = now + self._backoff
            self._backoff = min(self._backoff * 2, 1.0)
            if not self.conns and now - self._down_since > self.reconnect_timeout:
                self.error = BackendUnavailable(f"worker at {self.endpoint} stayed unreachable: {exc}")

    def submit(self, sample, stop=None) -> bool:
        """Send one sample, blocking until a connection has room.

        Returns False if ``stop`` was set while waiting.
        """
        while True:
            with self._cv:
                self._heal()
                if self.error is not None:
                    raise self.error
                ready = [c for c in self.conns if c.has_capacity()]
                if not ready:
                    if stop is not None and stop.is_set():
                        return False
                    self._cv.wait(0.05)
                    continue
                conn = min(ready, key=lambda c: c.outstanding)
            try:
                conn.submit(sample, sample)
            except ConnectionLost:
                continue
            return True

    def outstanding(self) -> int:
        return sum(c.outstanding for c in self.conns + self._retiring)

    def wait_drained(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        for c in list(self.conns) + list(self._retiring):
            if not c.wait_drained(max(0.0, deadline - time.monotonic())):
                return False
        return True

    def close(self) -> None:
        with self._cv:
            conns, self.conns = self.conns + self._retiring, []
            self._retiring = []
            self.target = 0
        for c in conns:
            c.close()
