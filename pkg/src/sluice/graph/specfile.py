"""Pipeline spec files.

Schema (YAML or JSON, ``version: 1``)::

    version: 1
    pipes:
      - name: decode            # registry name, required
        params: {factor: 4}     # scalar/string values, optional
        tag: dec                # optional, unique
        depends_on: [other]     # optional list of tags
        fixed: false            # optional
        random: false           # optional
        size_cost_exponent: 1.0 # optional
    source:                     # optional default binding
      type: synthetic
      n: 1000
      size: 4096
"""
from __future__ import annotations

from pathlib import Path

import yaml

from ..errors import SpecFileError
from .model import Step, TransformSpec, compose
from .sources import source_from_dict

SPEC_VERSION = 1
_PIPE_KEYS = {"name", "params", "tag", "depends_on", "fixed", "random", "size_cost_exponent"}


def parse_spec(doc: dict):
    """Return ``(graph, default_source_or_None)`` for a parsed document."""
    if not isinstance(doc, dict):
        raise SpecFileError("spec must be a mapping")
    version = doc.get("version")
    if version != SPEC_VERSION:
        raise SpecFileError(f"unsupported spec version {version!r}")
    pipes = doc.get("pipes")
    if not isinstance(pipes, list) or not pipes:
        raise SpecFileError("'pipes' must be a non-empty list")
    steps = []
    for i, entry in enumerate(pipes):
        if not isinstance(entry, dict) or "name" not in entry:
            raise SpecFileError(f"pipe #{i} needs a 'name'")
        unknown = set(entry) - _PIPE_KEYS
        if unknown:
            raise SpecFileError(f"pipe #{i} has unknown keys {sorted(unknown)}")
        params = entry.get("params") or {}
        step = Step(TransformSpec.make(entry["name"], **params))
        if entry.get("tag") is not None:
            step.tag(str(entry["tag"]))
        step.depends_on(entry.get("depends_on") or [])
        if entry.get("fixed"):
            step.fix()
        if entry.get("random"):
            step.randomize()
        step.cost_exponent(entry.get("size_cost_exponent", 1.0))
        steps.append(step)
    graph = compose(steps)
    src = doc.get("source")
    return graph, (source_from_dict(src) if src else None)


def load_spec(path):
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecFileError(str(exc)) from exc
    return parse_spec(doc)
