import pytest

from sluice.remote.worker import WorkerProcess


@pytest.fixture(scope="session")
def worker():
    """A shared remote worker daemon on loopback."""
    w = WorkerProcess("127.0.0.1:0", parallelism=64)
    yield w
    w.stop()


@pytest.fixture
def small_worker():
    """A dedicated worker with a low connection cap."""
    w = WorkerProcess("127.0.0.1:0", parallelism=2)
    yield w
    w.stop()
