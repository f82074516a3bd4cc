"""Logical dataflow model."""
from .constraints import (
    Violation,
    anchored,
    constraint_relation,
    is_permissible,
    linear_extensions,
    linear_segments,
    reordered,
    validate,
)
from .model import LogicalGraph, PipeNode, Step, TransformSpec, attach_source, compose, zip_graphs
from .sample import DataSample, Member, derive_seed
from .sources import DirectorySource, LimitedSource, SourceBinding, SyntheticSource
from .specfile import load_spec, parse_spec

__all__ = [
    "DataSample", "DirectorySource", "LimitedSource", "LogicalGraph", "Member", "PipeNode",
    "SourceBinding", "Step", "SyntheticSource", "TransformSpec", "Violation", "anchored",
    "attach_source", "compose", "constraint_relation", "derive_seed", "is_permissible",
    "linear_extensions", "linear_segments", "load_spec", "parse_spec", "reordered",
    "validate", "zip_graphs",
]
