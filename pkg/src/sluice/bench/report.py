"""Synthetic operator specs and benchmark reports."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..graph.model import Step


@dataclass(frozen=True)
class SyntheticOpSpec:
    """One busy-work operator for scenario pipelines.

    ``compute_us`` is a fixed cost per sample and ``compute_ns_per_byte`` a cost
    per input byte. ``remote_speedup_hint`` is the parallelism the operator is
    given when a scenario offloads it.
    """

    name: str
    compute_us: float = 0.0
    compute_ns_per_byte: float = 0.0
    size_factor: float = 1.0
    random: bool = False
    remote_speedup_hint: int = 1

    def __post_init__(self):
        if self.size_factor <= 0:
            raise ValueError("size_factor must be positive")
        if self.compute_us < 0 or self.compute_ns_per_byte < 0:
            raise ValueError("compute costs must be non-negative")

    def step(self) -> Step:
        s = Step.of("synthetic", cost_us=self.compute_us, cost_ns_per_byte=self.compute_ns_per_byte,
                    size_factor=self.size_factor, mode="sleep").tag(self.name)
        if not self.compute_ns_per_byte:
            s = s.cost_exponent(0.0)  # cost does not grow with input size
        return s.randomize() if self.random else s


@dataclass
class RunRecord:
    label: str
    samples: int
    wall_s: float
    plan: str = ""

    @property
    def samples_per_s(self) -> float:
        return self.samples / self.wall_s if self.wall_s > 0 else 0.0


@dataclass
class BenchReport:
    scenario: str
    runs: list = field(default_factory=list)
    ratios: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    latencies: dict = field(default_factory=dict)  # label -> {pipe: seconds}
    explanation: str = ""
    actions: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def run(self, label: str) -> RunRecord:
        for r in self.runs:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def wall_s(self) -> float:
        return sum(r.wall_s for r in self.runs)

    @property
    def samples_per_s(self) -> float:
        n = sum(r.samples for r in self.runs)
        return n / self.wall_s if self.wall_s > 0 else 0.0

    @property
    def action_digest(self) -> Optional[str]:
        if not self.actions:
            return None
        h = hashlib.sha256("\n".join(json.dumps(a, sort_keys=True) for a in self.actions).encode())
        return h.hexdigest()[:16]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "wall_s": self.wall_s,
            "samples_per_s": self.samples_per_s,
            "runs": [dict(asdict(r), samples_per_s=r.samples_per_s) for r in self.runs],
            "ratios": self.ratios,
            "checks": self.checks,
            "latencies": {k: {str(p): v for p, v in t.items()} for k, t in self.latencies.items()},
            "explanation": self.explanation,
            "action_digest": self.action_digest,
            "actions": self.actions,
            "details": self.details,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True, default=str)

    def text(self) -> str:
        lines = [f"scenario: {self.scenario}", f"{'run':<28}{'samples':>8}{'wall s':>10}{'samples/s':>12}"]
        for r in self.runs:
            lines.append(f"{r.label:<28}{r.samples:>8}{r.wall_s:>10.3f}{r.samples_per_s:>12.1f}")
        for k, v in self.ratios.items():
            lines.append(f"ratio {k}: {v:.3f}")
        for label, table in self.latencies.items():
            lines.append(f"latency ({label}):")
            for p, s in sorted(table.items()):
                lines.append(f"  pipe {p}: {s * 1e3:.3f} ms")
        for k, ok in self.checks.items():
            lines.append(f"check {k}: {'pass' if ok else 'FAIL'}")
        if self.action_digest:
            lines.append(f"actions: {len(self.actions)} (digest {self.action_digest})")
        if self.explanation:
            lines.append("")
            lines.append(self.explanation.rstrip())
        return "\n".join(lines) + "\n"
