"""Composable streaming input pipelines with a cost-based optimizer."""

__version__ = "0.1.0"
