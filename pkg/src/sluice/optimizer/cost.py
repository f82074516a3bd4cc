"""Cost model over profiled statistics.

All costs are seconds per source sample. ``plan`` arguments may be a Plan or
a bare LogicalGraph; only the (possibly reordered) topology is consulted.
"""
from __future__ import annotations

from typing import Optional

from ..errors import GroupNotContiguous, IllegalCacheSite, MissingStats, ZeroInputSize


def _graph(plan):
    return getattr(plan, "graph", plan)


def _stat(stats, pid, name):
    st = stats.pipes.get(pid)
    value = getattr(st, name) if st is not None else None
    if value is None:
        raise MissingStats(f"{name} missing for pipe {pid}")
    return value


def _tput_base(stats) -> float:
    if not stats.tput_base or stats.tput_base <= 0:
        raise MissingStats("tput_base must be profiled and positive")
    return stats.tput_base


def f_fraction(p: int, stats, nodes=None) -> float:
    """Share of the baseline latency spent in ``p``; ``nodes`` limits the sum."""
    nodes = stats.pipes.keys() if nodes is None else nodes
    lat = _stat(stats, p, "lat_base")
    total = 0.0
    for n in nodes:
        total += _stat(stats, n, "lat_base")
    return lat / total if total > 0 else 0.0


def cost_base(p: int, stats, nodes=None) -> float:
    return f_fraction(p, stats, nodes) / _tput_base(stats)


def size_scaling(p: int, stats) -> float:
    size_in = _stat(stats, p, "size_in")
    if size_in <= 0:
        raise ZeroInputSize(f"pipe {p} has mean input size {size_in}")
    return _stat(stats, p, "size_out") / size_in


def _size_raw(stats, source: int) -> float:
    st = stats.pipes.get(source)
    if st is not None and st.size_out is not None:
        return st.size_out
    if stats.size_raw is None:
        raise MissingStats("size_raw")
    return stats.size_raw


def propagate_sizes(plan, stats) -> tuple:
    """``(in_R, out_R)`` maps: expected bytes entering and leaving each node.

    A source emits its mean raw size; every other node receives the sum of its
    producers' outputs and scales it by S(p), so ``in_R`` is ``size_raw`` times
    the product of S over the node's ancestors.
    """
    g = _graph(plan)
    in_r, out_r = {}, {}
    for nid in g.topo_order():
        node = g.node(nid)
        if node.kind == "source":
            in_r[nid] = 0.0
            out_r[nid] = _size_raw(stats, nid)
            continue
        in_r[nid] = sum(out_r[u] for u in g.preds[nid])
        if node.kind in ("prefetch", "cache"):
            s = 1.0
        elif node.kind == "fused":
            s = 1.0
            for m in node.member_ids:
                s *= size_scaling(m, stats)
        else:
            s = size_scaling(nid, stats)
        out_r[nid] = in_r[nid] * s
    return in_r, out_r


def reordered_input_size(plan, p: int, stats) -> float:
    g = _graph(plan)
    if g.node(p).kind == "source":
        return _size_raw(stats, p)
    return propagate_sizes(plan, stats)[0][p]


def cost_reordered(plan, p: int, stats, nodes=None, sizes=None) -> float:
    g = _graph(plan)
    node = g.node(p)
    base = cost_base(p, stats, nodes)
    if node.kind == "source":
        return base
    in_r = (sizes or propagate_sizes(plan, stats))[0][p]
    size_in = _stat(stats, p, "size_in")
    if size_in <= 0:
        raise ZeroInputSize(f"pipe {p} has mean input size {size_in}")
    return (in_r / size_in) ** node.size_cost_exponent * base


def random_ancestry(plan, site: int) -> bool:
    g = _graph(plan)
    return any(g.node(a).random for a in g.ancestors(site) | {site})


def exclusive_ancestors(plan, site: int) -> set:
    """Nodes every path of which to the output runs through ``site`` (site included)."""
    g = _graph(plan)
    out = {site}
    for a in sorted(g.ancestors(site), key=g.topo_order().index, reverse=True):
        if all(s in out for s in g.succs[a]):
            out.add(a)
    return out


def cache_read_cost(plan, site: int, stats, params, sizes=None) -> float:
    sizes = sizes or propagate_sizes(plan, stats)
    return params.d * sizes[1][site]


def cost_with_cache(plan, site: int, stats, params, nodes=None) -> float:
    """Total cost with a cache placed on the output edge of node ``site``."""
    if random_ancestry(plan, site):
        raise IllegalCacheSite(f"node {site} has a random-marked ancestor")
    g = _graph(plan)
    nodes = _base_nodes(g) if nodes is None else nodes
    sizes = propagate_sizes(plan, stats)
    zeroed = exclusive_ancestors(plan, site)
    total = sum(cost_reordered(plan, n, stats, nodes, sizes) for n in nodes if n not in zeroed)
    return total + cache_read_cost(plan, site, stats, params, sizes)


def offload_speedup(p: int, v, stats) -> float:
    st = stats.pipes.get(p)
    key = v.key() if hasattr(v, "key") else str(v)
    tput = st.tput_v_m.get(key) if st is not None else None
    if tput is None or tput.value is None:
        raise MissingStats(f"tput_v missing for pipe {p} on {key}")
    return tput.value / _tput_base(stats)


def offload_cost_from(cost_r: float, f: float, s_v: float) -> float:
    """Amdahl inversion: the pipe's cost once the whole-pipeline speedup is ``s_v``."""
    if f <= 0:
        return 0.0
    if s_v <= 0:
        return float("inf")
    return max(0.0, cost_r * (1.0 / s_v - (1.0 - f)) / f)


def offload_cost(p: int, v, plan, stats, nodes=None, sizes=None) -> float:
    cost_r = cost_reordered(plan, p, stats, nodes, sizes)
    if v is None or getattr(v, "is_base", False):
        return cost_r
    f = f_fraction(p, stats, nodes)
    if f <= 0:
        return 0.0
    return offload_cost_from(cost_r, f, offload_speedup(p, v, stats))


def check_contiguous(plan, group) -> None:
    g = _graph(plan)
    for a, b in zip(group, group[1:]):
        if g.succs.get(a) != [b] or g.preds.get(b) != [a]:
            raise GroupNotContiguous(f"pipes {a} and {b} are not adjacent in the plan")


def fusion_io_factor(group, plan, stats, sizes=None) -> float:
    """Bytes crossing dispatch boundaries when fused, relative to unfused."""
    group = tuple(group)
    if len(group) < 2:
        raise GroupNotContiguous("a fusion group needs at least two pipes")
    check_contiguous(plan, group)
    in_r, out_r = sizes or propagate_sizes(plan, stats)
    ends = in_r[group[0]] + out_r[group[-1]]
    unfused = ends + 2 * sum(in_r[q] for q in group[1:])
    return ends / unfused if unfused > 0 else 1.0


def fused_cost(group, v, plan, stats, nodes=None, sizes=None) -> float:
    group = tuple(group)
    costs = [offload_cost(q, v, plan, stats, nodes, sizes) for q in group]
    if len(group) == 1:
        return costs[0]
    return fusion_io_factor(group, plan, stats, sizes) * sum(costs)


def _base_nodes(g) -> tuple:
    return tuple(n.id for n in g.nodes if n.kind not in ("prefetch", "cache", "fused"))


def base_cost_table(plan, stats, nodes=None) -> dict:
    """Per-node ``f``, ``S``, ``in_R``, ``cost_base`` and ``cost_R`` for explanations."""
    g = _graph(plan)
    nodes = _base_nodes(g) if nodes is None else nodes
    sizes = propagate_sizes(plan, stats)
    out = {}
    for n in nodes:
        kind = g.node(n).kind
        out[n] = {
            "f": f_fraction(n, stats, nodes),
            "S": None if kind == "source" else size_scaling(n, stats),
            "in_R": sizes[0][n] if kind != "source" else None,
            "cost_base": cost_base(n, stats, nodes),
            "cost_R": cost_reordered(plan, n, stats, nodes, sizes),
        }
    return out


def total_cost(plan, stats, params, assignment: Optional[dict] = None, groups=(),
               cache_site: Optional[int] = None, nodes=None, sizes=None) -> float:
    """Plan cost: base pipes at cost_R, offloaded pipes at cost_v, fused groups
    discounted by their I/O factor, and exclusive cache ancestors at zero."""
    g = _graph(plan)
    nodes = _base_nodes(g) if nodes is None else nodes
    sizes = sizes or propagate_sizes(plan, stats)
    assignment = assignment or {}
    zeroed = exclusive_ancestors(plan, cache_site) if cache_site is not None else set()
    grouped = {q for grp in groups for q in grp}
    total = 0.0
    for grp in groups:
        live = [q for q in grp if q not in zeroed]
        if live:
            total += fused_cost(live, assignment[live[0]], plan, stats, nodes, sizes)
    for n in nodes:
        if n in zeroed or n in grouped:
            continue
        total += offload_cost(n, assignment.get(n), plan, stats, nodes, sizes)
    if cache_site is not None:
        total += cache_read_cost(plan, cache_site, stats, params, sizes)
    return total
