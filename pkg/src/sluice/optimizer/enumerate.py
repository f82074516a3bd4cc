"""Enumeration of permissible pipe orderings."""
from __future__ import annotations

import itertools

from ..graph.constraints import constraint_relation, linear_extensions, linear_segments


def recursive_orderings(items, relation) -> list:
    """Orderings built by removing the last pipe and re-inserting it.

    The orderings of ``items[:-1]`` are enumerated recursively; the removed
    pipe is then appended and swapped backwards one position at a time for as
    long as the constraints allow each swap.
    """
    items = tuple(items)
    if len(items) <= 1:
        return [items]
    last = items[-1]
    out = []
    for shrunk in recursive_orderings(items[:-1], relation):
        cur = list(shrunk) + [last]
        out.append(tuple(cur))
        i = len(cur) - 1
        while i > 0 and (cur[i - 1], last) not in relation:
            cur[i - 1], cur[i] = cur[i], cur[i - 1]
            i -= 1
            out.append(tuple(cur))
    return out


def _expand(graph, seg_orders) -> tuple:
    """Full node sequence: the original topological order with each linear
    segment's slots refilled by its chosen permutation."""
    topo = list(graph.topo_order())
    for seg, order in seg_orders:
        slots = sorted(topo.index(n) for n in seg)
        for slot, n in zip(slots, order):
            topo[slot] = n
    return tuple(topo)


def enumerate_reorderings(graph, method: str = "extensions") -> list:
    """Every permissible ordering, reordering only within linear segments.

    ``method`` picks the per-segment enumerator: ``"extensions"`` (minimal
    element recursion) or ``"recursive"`` (remove-last-and-swap). Orderings
    are returned as full node-id sequences, original ordering first.
    """
    rel = constraint_relation(graph)
    segments = linear_segments(graph)
    per_seg = []
    for seg in segments:
        if method == "recursive":
            orders = recursive_orderings(seg, rel)
        else:
            orders = linear_extensions(seg, rel)
        per_seg.append([(seg, o) for o in orders])
    out = [_expand(graph, combo) for combo in itertools.product(*per_seg)]
    original = graph.topo_order()
    out.sort(key=lambda o: (o != original, inversions(original, o), o))
    return out


def inversions(original, ordering) -> int:
    pos = {n: i for i, n in enumerate(original)}
    seq = [pos[n] for n in ordering]
    return sum(1 for i in range(len(seq)) for j in range(i + 1, len(seq)) if seq[i] > seq[j])


def segment_projection(graph, ordering) -> tuple:
    """The ordering restricted to each linear segment (for set comparisons)."""
    pos = {n: i for i, n in enumerate(ordering)}
    return tuple(tuple(sorted(seg, key=pos.__getitem__)) for seg in linear_segments(graph))
