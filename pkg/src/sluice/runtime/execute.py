"""Applying pipes (or fused groups of pipes) to one sample.

Shared by in-driver execution and the remote worker, which is what makes
both produce byte-identical results for the same seed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .. import transforms
from ..errors import UnsupportedTopology
from ..graph.sample import DataSample, derive_seed
from ..telemetry import TraceRecord

NEEDED_PARTS = "_parts"


class StepError(Exception):
    """A transform raised; carries the pipe that failed."""

    def __init__(self, pipe_id: int, cause: str):
        super().__init__(f"pipe {pipe_id}: {cause}")
        self.pipe_id = pipe_id
        self.cause = cause


@dataclass(frozen=True)
class Bundle:
    """The pipes one dispatch runs: ``members`` is ``((pipe id, TransformSpec), ...)``."""

    report_id: int
    members: tuple
    seed: int = 0
    epoch: int = 0
    variant: str = "base"

    @classmethod
    def for_node(cls, node, seed=0, epoch=0, variant="base") -> "Bundle":
        if node.kind == "fused":
            members = tuple(zip(node.member_ids, node.members_specs))
        else:
            members = ((node.id, node.spec),)
        return cls(node.id, members, seed, epoch, variant)

    def to_dict(self) -> dict:
        return {"pipe_id": self.report_id, "members": [[i, s.to_dict()] for i, s in self.members],
                "seed": self.seed, "epoch": self.epoch, "variant": self.variant}

    @classmethod
    def from_dict(cls, d: dict) -> "Bundle":
        from ..graph.model import TransformSpec

        return cls(int(d["pipe_id"]), tuple((int(i), TransformSpec.from_dict(s)) for i, s in d["members"]),
                   int(d.get("seed", 0)), int(d.get("epoch", 0)), str(d.get("variant", "base")))

    def check(self) -> None:
        flattens = 0
        for _, spec in self.members:
            entry = transforms.lookup(spec.name)
            if entry.fn is None:
                raise UnsupportedTopology(f"{spec.name!r} cannot run inside a dispatch")
            flattens += entry.kind == "flatten"
        if flattens > 1:
            raise UnsupportedTopology("at most one flatten per dispatch")


def needed_parts(sample: DataSample):
    raw = sample.meta.get(NEEDED_PARTS)
    if raw is None:
        return None
    return {int(x) for x in raw.split(",") if x}


def _apply(pipe_id, spec, sample, bundle):
    entry = transforms.lookup(spec.name)
    if sample.tombstone:
        return [sample]
    seed = derive_seed(bundle.seed, bundle.epoch, sample.sample_id, pipe_id)
    params = spec.param_dict
    try:
        if entry.kind == "map":
            return [replace(sample, payload=entry.fn(sample.payload, params, seed))]
        if entry.kind == "filter":
            return [sample] if entry.fn(sample.payload, params, seed) else [sample.dropped()]
        if entry.kind == "flatten":
            if sample.part is not None:
                raise UnsupportedTopology("nested flatten is not supported")
            pieces = entry.fn(sample.payload, params, seed)
            want = needed_parts(sample)
            meta = {k: v for k, v in sample.meta.items() if k != NEEDED_PARTS}
            n = len(pieces)
            out = [replace(sample, payload=p, part=(i, n), meta=dict(meta), trace=None)
                   for i, p in enumerate(pieces) if want is None or i in want]
            if out and sample.trace is not None:
                out[0].trace = sample.trace
            return out
    except UnsupportedTopology:
        raise
    except Exception as exc:  # any transform bug is reported against its pipe
        raise StepError(pipe_id, f"{type(exc).__name__}: {exc}") from exc
    raise UnsupportedTopology(f"cannot apply {entry.kind} pipe {pipe_id} per sample")


def run_bundle(sample: DataSample, bundle: Bundle, buffer_len=None) -> list:
    """Run every member in order; traced samples gain one record for the bundle."""
    t0 = time.perf_counter_ns()
    bytes_in = sample.nbytes
    current = [sample]
    for pipe_id, spec in bundle.members:
        nxt = []
        for s in current:
            nxt.extend(_apply(pipe_id, spec, s, bundle))
        current = nxt
    elapsed = time.perf_counter_ns() - t0
    traced = [s for s in current if s.trace is not None]
    if traced:
        rec = TraceRecord(bundle.report_id, elapsed, bytes_in, sum(s.nbytes for s in current),
                          bundle.variant, buffer_len)
        traced[0].trace = list(traced[0].trace) + [rec]
    return current
