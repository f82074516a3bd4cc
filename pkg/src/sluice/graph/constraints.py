"""Validation, ordering constraints and permissible reorderings."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

from .. import transforms
from ..errors import NotAPermutation, UnknownTransform
from .model import LogicalGraph


@dataclass(frozen=True)
class Violation:
    code: str
    node: Optional[int]
    message: str

    def __str__(self):
        where = f" (node {self.node})" if self.node is not None else ""
        return f"{self.code}{where}: {self.message}"


def validate(graph: LogicalGraph, registered: Optional[Iterable[int]] = None) -> list:
    """Return every invariant violation; an empty list means the graph is valid.

    ``registered`` optionally lists pipe ids known to a dataset; registered ids
    absent from the graph are reported as orphans.
    """
    out = []
    try:
        ids = [n.id for n in graph.nodes]
    except Exception as exc:  # malformed node objects
        return [Violation("Malformed", None, repr(exc))]
    if len(ids) != len(set(ids)):
        out.append(Violation("DuplicateId", None, "node ids are not unique"))
    idset = set(ids)
    if not ids:
        return [Violation("Empty", None, "graph has no nodes")]

    for u, v in graph.edges:
        if u not in idset or v not in idset:
            out.append(Violation("DanglingEdge", None, f"edge {u}->{v} references a missing node"))
    if any(v.code == "DanglingEdge" for v in out):
        return out

    for n in graph.nodes:
        try:
            entry = transforms.lookup(n.name)
        except UnknownTransform:
            out.append(Violation("UnknownTransform", n.id, n.name))
            continue
        if entry.kind != n.kind and n.kind != "fused":
            out.append(Violation("KindMismatch", n.id, f"{n.name} is a {entry.kind}, node says {n.kind}"))

    try:
        graph.topo_order()
    except ValueError:
        out.append(Violation("Cycle", None, "edge set contains a cycle"))
        return out

    tags = {}
    for n in graph.nodes:
        if n.tag is None:
            continue
        if n.tag in tags:
            out.append(Violation("DuplicateTag", n.id, n.tag))
        tags[n.tag] = n.id

    sinks = [n.id for n in graph.nodes if not graph.succs.get(n.id)]
    if len(sinks) != 1:
        out.append(Violation("OutputCount", None, f"expected exactly one output node, found {sinks}"))

    for n in graph.nodes:
        indeg = len(graph.preds.get(n.id, ()))
        if n.kind == "source":
            if indeg:
                out.append(Violation("SourceHasInput", n.id, "sources must have in-degree 0"))
        elif indeg == 0:
            out.append(Violation("NoInput", n.id, "non-source node has no producer"))
        if n.kind == "zip" and indeg < 2:
            out.append(Violation("ArityMismatch", n.id, "zip needs at least two inputs"))
        if n.kind not in ("zip", "source") and indeg > 1:
            out.append(Violation("ArityMismatch", n.id, f"{n.kind} accepts a single input"))
    if not graph.source_ids:
        out.append(Violation("NoSource", None, "graph has no source"))

    reach = set()
    for s in graph.source_ids:
        reach.add(s)
        reach |= graph.descendants(s)
    for n in graph.nodes:
        if n.id not in reach:
            out.append(Violation("Unreachable", n.id, "not reachable from any source"))
    if len(sinks) == 1:
        to_out = graph.ancestors(sinks[0]) | {sinks[0]}
        for n in graph.nodes:
            if n.id not in to_out:
                out.append(Violation("DeadEnd", n.id, "does not reach the output"))

    for n in graph.nodes:
        for t in sorted(n.depends_on):
            if t not in tags:
                out.append(Violation("UnresolvedTag", n.id, f"depends_on {t!r} names no node"))
            elif tags[t] not in graph.ancestors(n.id):
                out.append(Violation("NotAncestor", n.id, f"depends_on {t!r} is not upstream"))

    if registered is not None:
        for pid in sorted(set(registered) - idset):
            out.append(Violation("Orphan", pid, "registered pipe is never placed in the dataflow"))

    if not out:
        rel = constraint_relation(graph)
        if any((b, a) in rel for a, b in rel) or any(a == b for a, b in rel):
            out.append(Violation("FixedConflict", None, "constraint closure is not a partial order"))
    return out


def anchored(graph: LogicalGraph, nid: int) -> bool:
    """True when the node keeps its position (fixed, structural, or degree > 1)."""
    n = graph.node(nid)
    if not n.reorderable:
        return True
    return len(graph.preds.get(nid, ())) > 1 or len(graph.succs.get(nid, ())) > 1


def constraint_relation(graph: LogicalGraph) -> frozenset:
    """Strict partial order ``{(a, b): a must precede b}`` over node ids."""
    edges = set()
    tags = graph.tags()
    for n in graph.nodes:
        for t in n.depends_on:
            if t in tags:
                edges.add((tags[t], n.id))
        if n.kind == "source":
            for m in graph.nodes:
                if m.kind != "source":
                    edges.add((n.id, m.id))
        if anchored(graph, n.id):
            for a in graph.ancestors(n.id):
                edges.add((a, n.id))
            for d in graph.descendants(n.id):
                edges.add((n.id, d))
    return frozenset(_closure(edges))


def _closure(edges: set) -> set:
    succ = {}
    for a, b in edges:
        succ.setdefault(a, set()).add(b)
    out = set()
    for a in list(succ):
        seen, stack = set(), list(succ[a])
        while stack:
            x = stack.pop()
            if x in seen:
                continue
            seen.add(x)
            stack.extend(succ.get(x, ()))
        out.update((a, x) for x in seen)
    return out


def is_permissible(graph: LogicalGraph, ordering) -> bool:
    ordering = tuple(ordering)
    if sorted(ordering) != sorted(n.id for n in graph.nodes):
        raise NotAPermutation(f"{ordering} is not a permutation of the graph's nodes")
    pos = {nid: i for i, nid in enumerate(ordering)}
    return all(pos[a] < pos[b] for a, b in constraint_relation(graph))


def linear_extensions(items, relation) -> list:
    """All orderings of ``items`` consistent with the strict order ``relation``.

    Standard minimal-element recursion; output is in lexicographic order of
    the sorted items.
    """
    items = list(items)
    ins = set(items)
    preds = {i: {a for a, b in relation if b == i and a in ins} for i in items}
    out, prefix, placed = [], [], set()

    def rec():
        if len(prefix) == len(items):
            out.append(tuple(prefix))
            return
        for i in items:
            if i not in placed and preds[i] <= placed:
                placed.add(i)
                prefix.append(i)
                rec()
                prefix.pop()
                placed.discard(i)

    rec()
    return out


def linear_segments(graph: LogicalGraph) -> list:
    """Maximal chains of reorderable pipes, each in original order."""
    segs, seen = [], set()
    for nid in graph.topo_order():
        if nid in seen or anchored(graph, nid):
            continue
        seg = [nid]
        seen.add(nid)
        cur = nid
        while True:
            nxt = graph.succs.get(cur, ())
            if len(nxt) != 1 or anchored(graph, nxt[0]) or nxt[0] in seen:
                break
            cur = nxt[0]
            seg.append(cur)
            seen.add(cur)
        segs.append(tuple(seg))
    return segs


def reordered(graph: LogicalGraph, ordering) -> LogicalGraph:
    """Rewire each linear segment to follow its members' order in ``ordering``."""
    pos = {nid: i for i, nid in enumerate(ordering)}
    edges = set(graph.edges)
    for seg in linear_segments(graph):
        first, last = seg[0], seg[-1]
        pred = graph.preds.get(first, [None])
        succ = graph.succs.get(last, [None])
        pred = pred[0] if pred else None
        succ = succ[0] if succ else None
        old = list(zip(seg, seg[1:]))
        if pred is not None:
            old.append((pred, first))
        if succ is not None:
            old.append((last, succ))
        edges -= set(old)
        new = sorted(seg, key=pos.__getitem__)
        chain = ([pred] if pred is not None else []) + new + ([succ] if succ is not None else [])
        edges |= set(zip(chain, chain[1:]))
    return replace(graph, edges=tuple(sorted(edges, key=lambda e: (pos.get(e[0], e[0]), e))))
