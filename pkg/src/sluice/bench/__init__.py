"""Synthetic benchmark scenarios."""
from .report import BenchReport, RunRecord, SyntheticOpSpec
from .scenarios import SCENARIOS, load_defaults, run_scenario

__all__ = ["BenchReport", "RunRecord", "SCENARIOS", "SyntheticOpSpec", "load_defaults", "run_scenario"]
