"""Human-readable account of an optimized plan."""
from __future__ import annotations

from . import cost as cm
from .plan import Plan


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def explain(plan: Plan, stats, params=None) -> str:
    """Deterministic text: one block per pass, then the per-pipe cost table."""
    lines = []
    for name, info in plan.notes:
        lines.append(f"[{name}]")
        for k in sorted(info):
            lines.append(f"  {k}: {_fmt(info[k])}")
    lines.append("[plan]")
    lines.append(f"  ordering: {list(plan.ordering)}")
    lines.append(f"  cache_site: {_fmt(plan.cache_site)}")
    lines.append(f"  fusion_groups: {[list(g) for g in plan.fusion_groups]}")
    lines.append("  assignment: " + (", ".join(f"{p}={v.key()}" for p, v in plan.assignment) or "all base"))
    lines.append(f"  prefetch_sites: {list(plan.prefetch_sites)}")
    lines.append(f"  shards: {plan.shards}")
    lines.append(f"  cost: {_fmt(plan.cost)} s/sample")
    if plan.cache_site is not None and params is not None:
        sizes = cm.propagate_sizes(plan, stats)
        # written once in the first epoch; reported, not scored
        lines.append(f"  cache_write_bytes_per_sample: {_fmt(sizes[1][plan.cache_site])}")
    lines.append("[costs]")
    lines.append(f"  {'pipe':>4} {'name':<12} {'f':>9} {'S':>9} {'in_R':>11} {'cost_base':>11} {'cost_R':>11} variant")
    table = cm.base_cost_table(plan, stats)
    g = plan.graph
    for nid in g.topo_order():
        if nid not in table:
            continue
        row = table[nid]
        lines.append(
            f"  {nid:>4} {g.node(nid).name:<12} {_fmt(row['f']):>9} {_fmt(row['S']):>9} "
            f"{_fmt(row['in_R']):>11} {_fmt(row['cost_base']):>11} {_fmt(row['cost_R']):>11} "
            f"{plan.variant(nid).key()}")
    return "\n".join(lines) + "\n"
