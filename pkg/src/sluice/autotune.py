"""Hill-climbing controller that right-sizes offloaded pipes against demand.

Every interval the tuner reads the output prefetch buffer. A full buffer means
the consumer is the bottleneck, so one offloaded pipe gives up a unit of
parallelism (dropping to the base variant below one). An empty buffer means
the pipeline is the bottleneck, so the most starved offloaded pipe gains a
unit, or the slowest base pipe among those the plan offloaded is moved back
off the driver.

Actions are appended to a JSONL log, one object per interval.
"""
from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

from .errors import NoOp, ResourceExhausted, SluiceError
from .runtime.variants import BASE_VARIANT

OVER = "over_provisioned"
BOTTLENECKED = "bottlenecked"
STEADY = "steady"

UP, DOWN = 1, -1


@dataclass(frozen=True)
class TunerConfig:
    interval: float = 5.0
    low_threshold: float = 0.25
    high_threshold: float = 0.75
    step: int = 1
    cooldown: int = 2  # intervals before a pipe may move in the opposite direction
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.low_threshold < self.high_threshold <= 1:
            raise ValueError("thresholds must satisfy 0 <= low < high <= 1")
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if self.step < 1:
            raise ValueError("step must be >= 1")


@dataclass
class Action:
    interval: int
    state: str
    kind: str  # scale, mutate, noop or error
    pipe: Optional[int] = None
    before: Optional[str] = None
    after: Optional[str] = None
    reason: str = ""
    occupancy: tuple = (0, 0)
    at: float = 0.0
    held: int = 0  # executors held by offloaded pipes after the action
    extra: list = field(default_factory=list)  # victim actions taken to free capacity

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TunerState:
    p_star: frozenset
    variants: dict  # pipe -> the non-base variant the plan gave it
    rng: random.Random
    interval: int = 0
    last: dict = field(default_factory=dict)  # pipe -> (direction, interval)

    @classmethod
    def from_dataset(cls, ds, seed: int = 0) -> "TunerState":
        offloaded = {p: v for p, v in ds.assignment.items() if p in ds.graph.by_id and not v.is_base}
        return cls(frozenset(offloaded), offloaded, random.Random(seed))

    def cooling(self, pipe: int, direction: int, cooldown: int) -> bool:
        prev = self.last.get(pipe)
        return prev is not None and prev[0] == -direction and self.interval - prev[1] < cooldown

    def note(self, pipe: int, direction: int) -> None:
        self.last[pipe] = (direction, self.interval)


def detect(snapshot: tuple, config: TunerConfig) -> str:
    n, cap = snapshot
    if not cap:
        return STEADY
    frac = n / cap
    if frac > config.high_threshold:
        return OVER
    if frac < config.low_threshold:
        return BOTTLENECKED
    return STEADY


def _fraction(ds, pipe: int) -> float:
    site = ds.prefetch_site_for(pipe)
    n, cap = ds.buffer_occupancy(site if site is not None else "output")
    return n / cap if cap else 0.0


def _decrement(ds, pipe: int, step: int) -> tuple:
    """Lower ``pipe`` by ``step``; returns (kind, before, after)."""
    v = ds.variant(pipe)
    if v.parallelism > step:
        ds.scale(pipe, v.parallelism - step)
        return "scale", v.key(), ds.variant(pipe).key()
    ds.mutate(pipe, BASE_VARIANT)
    return "mutate", v.key(), BASE_VARIANT.key()


def scale_down_step(ds, state: TunerState, config: TunerConfig) -> Action:
    offloaded = sorted(p for p in ds.assignment if p in ds.graph.by_id and not ds.variant(p).is_base)
    if not offloaded:
        raise NoOp("no pipe runs on a non-base variant")
    ready = [p for p in offloaded if not state.cooling(p, DOWN, config.cooldown)]
    if not ready:
        raise NoOp("every offloaded pipe was just scaled up")
    pipe = state.rng.choice(ready)
    kind, before, after = _decrement(ds, pipe, config.step)
    state.note(pipe, DOWN)
    return Action(state.interval, OVER, kind, pipe, before, after, "output buffer above high threshold")


def _pick_up_target(ds, state: TunerState, config: TunerConfig):
    offloaded = [p for p in sorted(state.p_star) if not ds.variant(p).is_base]
    starved = [(_fraction(ds, p), p) for p in offloaded]
    starved = [(f, p) for f, p in starved if f < config.low_threshold]
    if starved:
        f, p = min(starved)
        return p, f"smallest buffer below threshold ({f:.2f})"
    base = [p for p in sorted(state.p_star) if ds.variant(p).is_base]
    if base:
        def lat(p):
            return ds.store.pipe(p).lat_base or 0.0
        p = max(base, key=lambda q: (lat(q), -q))
        return p, f"largest base latency among planned offloads ({lat(p):.3g}s)"
    return None, "no offloaded pipe has a starved buffer"


def _increment(ds, state: TunerState, pipe: int, step: int) -> tuple:
    v = ds.variant(pipe)
    if v.is_base:
        target = state.variants[pipe].with_parallelism(step)
        ds.mutate(pipe, target)
        return "mutate", v.key(), target.key()
    ds.scale(pipe, v.parallelism + step)
    return "scale", v.key(), ds.variant(pipe).key()


def scale_up_step(ds, state: TunerState, config: TunerConfig) -> Action:
    if not state.p_star:
        raise NoOp("the plan offloaded no pipe")
    pipe, reason = _pick_up_target(ds, state, config)
    if pipe is None:
        raise NoOp(reason)
    if state.cooling(pipe, UP, config.cooldown):
        raise NoOp(f"pipe {pipe} was just scaled down")
    extra = []
    try:
        kind, before, after = _increment(ds, state, pipe, config.step)
    except ResourceExhausted:
        family = state.variants[pipe].family()
        victims = [p for p in sorted(ds.assignment) if p != pipe and p in ds.graph.by_id
                   and not ds.variant(p).is_base and ds.variant(p).family() == family]
        if not victims:
            raise NoOp(f"backend for pipe {pipe} is at capacity and no other pipe shares it")
        victim = state.rng.choice(victims)
        vk, vb, va = _decrement(ds, victim, config.step)
        state.note(victim, DOWN)
        extra.append({"kind": vk, "pipe": victim, "before": vb, "after": va})
        kind, before, after = _increment(ds, state, pipe, config.step)
        reason += "; backend at capacity, freed a unit elsewhere"
    state.note(pipe, UP)
    return Action(state.interval, BOTTLENECKED, kind, pipe, before, after, reason, extra=extra)


class Tuner:
    """Background control loop over a DataSet's execution interface."""

    def __init__(self, ds, config: Optional[TunerConfig] = None, log_path=None, state: Optional[TunerState] = None):
        self.ds = ds
        self.config = config or TunerConfig()
        self.state = state or TunerState.from_dataset(ds, self.config.seed)
        self.actions: list = []
        self._log = open(log_path, "a") if log_path else None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def step(self) -> Action:
        """One detect-and-act round."""
        state = self.state
        snap = self.ds.buffer_occupancy("output")
        mode = detect(snap, self.config)
        try:
            if mode == OVER:
                act = scale_down_step(self.ds, state, self.config)
            elif mode == BOTTLENECKED:
                act = scale_up_step(self.ds, state, self.config)
            else:
                act = Action(state.interval, mode, "noop", reason="output buffer within thresholds")
        except NoOp as exc:
            act = Action(state.interval, mode, "noop", reason=str(exc))
        except SluiceError as exc:
            act = Action(state.interval, mode, "error", reason=f"{type(exc).__name__}: {exc}")
        act.occupancy = tuple(snap)
        act.at = time.time()
        act.held = total_workers(self.ds)
        self.actions.append(act)
        if self._log is not None:
            self._log.write(act.to_json() + "\n")
            self._log.flush()
        state.interval += 1
        return act

    def _loop(self) -> None:
        while not self._stop.wait(self.config.interval):
            self.step()

    def start(self) -> "Tuner":
        self._thread = threading.Thread(target=self._loop, name="sluice-tuner", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self._log is not None:
            self._log.close()
            self._log = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run(ds, config: Optional[TunerConfig] = None, log_path=None) -> Tuner:
    """Start tuning ``ds`` in the background; stop the returned handle when done."""
    return Tuner(ds, config, log_path).start()


def total_workers(ds) -> int:
    """Executors held across all offloaded pipes (per driver)."""
    return sum(v.parallelism for p, v in ds.assignment.items() if p in ds.graph.by_id and not v.is_base)
