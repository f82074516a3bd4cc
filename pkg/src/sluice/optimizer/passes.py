"""Static optimization passes and the pass driver."""
from __future__ import annotations

import itertools
import math
from typing import Optional

from ..errors import MissingStats, PlanSpaceOverflow
from ..graph.model import PipeNode, TransformSpec
from ..runtime.variants import BASE_VARIANT, CACHE_READ
from . import cost as cm
from .enumerate import enumerate_reorderings, inversions
from .plan import CostModelParams, Plan

TIE_RTOL = 1e-12


def _nodes(plan: Plan) -> tuple:
    return cm._base_nodes(plan.base)


def _argmin(costs):
    """Index of the first candidate whose cost is within TIE_RTOL of the minimum."""
    best = min(costs)
    limit = best + abs(best) * TIE_RTOL
    return next(i for i, c in enumerate(costs) if c <= limit)


def reorder_cost(plan: Plan, stats) -> float:
    nodes = _nodes(plan)
    sizes = cm.propagate_sizes(plan, stats)
    return sum(cm.cost_reordered(plan, n, stats, nodes, sizes) for n in nodes)


def reorder_pass(plan: Plan, stats, params: Optional[CostModelParams] = None) -> Plan:
    """Lowest Σ cost_R over every permissible ordering.

    Candidates come ordered original-first, then by inversion count against
    the original order, then lexicographically; ties keep the earliest.
    """
    candidates = enumerate_reorderings(plan.base)
    costs = [reorder_cost(Plan(plan.base, o), stats) for o in candidates]
    i = _argmin(costs)
    return plan.with_(ordering=candidates[i], cost=costs[i]).note(
        "reorder", candidates=len(candidates), chosen=list(candidates[i]), cost=costs[i],
        inversions=inversions(plan.base.topo_order(), candidates[i]))


def cache_sites(plan: Plan) -> list:
    """Nodes on the deterministic one-to-one prefix after a single source.

    A cache may follow such a node when neither it nor any ancestor is random.
    """
    g = plan.graph
    out = []
    for nid in g.topo_order():
        node = g.node(nid)
        chain = g.ancestors(nid) | {nid}
        if node.kind not in ("source", "map", "filter"):
            continue
        if sum(1 for a in chain if g.node(a).kind == "source") != 1:
            continue
        if any(g.node(a).kind not in ("source", "map", "filter") for a in chain):
            continue
        if any(len(g.preds[a]) > 1 or len(g.succs[a]) > 1 for a in chain):
            continue
        if cm.random_ancestry(g, nid):
            continue
        out.append(nid)
    return out


def insert_cache_pass(plan: Plan, stats, params: CostModelParams) -> tuple:
    """``(cache pipe or None, plan)``: cheapest of no cache and every legal site."""
    nodes = _nodes(plan)
    sites = cache_sites(plan)
    costs = [reorder_cost(plan, stats)]
    costs += [cm.cost_with_cache(plan, s, stats, params, nodes) for s in sites]
    i = _argmin(costs)
    site = None if i == 0 else sites[i - 1]
    new = plan.with_(cache_site=site, cost=costs[i]).note(
        "cache", sites=list(sites), costs=costs, chosen=site)
    if site is None:
        return None, new
    return PipeNode(new.new_ids()["cache"], TransformSpec("cache", (), "cache"), fixed=True), new


def variant_options(plan: Plan, backends) -> list:
    """``[(pipe id, (variants...)), ...]`` with the base variant first."""
    g = plan.graph
    pooled = [b.variant() for b in backends if b.kind != CACHE_READ]
    out = []
    for nid in g.topo_order():
        node = g.node(nid)
        if node.kind == "source":
            continue
        opts = (BASE_VARIANT,) + (tuple(pooled) if node.offloadable else ())
        out.append((nid, opts))
    return out


def fusion_groups(plan: Plan, assignment: dict, cache_site: Optional[int] = None) -> tuple:
    """Maximal runs of adjacent fusable pipes sharing one non-base variant."""
    g = plan.graph
    groups, run = [], []

    def close():
        if len(run) >= 2:
            groups.append(tuple(run))
        run.clear()

    for nid in g.topo_order():
        v = assignment.get(nid, BASE_VARIANT)
        node = g.node(nid)
        if v.is_base or not node.fusable:
            close()
            continue
        if run:
            prev = run[-1]
            linked = g.succs[prev] == [nid] and g.preds[nid] == [prev]
            if not linked or assignment.get(prev) != v or prev == cache_site:
                close()
        run.append(nid)
    close()
    return tuple(groups)


class _Scorer:
    """Per-pipe cost_v table so each candidate costs O(pipes)."""

    def __init__(self, plan, stats, params, options):
        self.plan, self.stats, self.params = plan, stats, params
        self.nodes = _nodes(plan)
        self.sizes = cm.propagate_sizes(plan, stats)
        self.cost_v = {}
        for nid, opts in options:
            for v in opts:
                self.cost_v[nid, v] = cm.offload_cost(nid, v, plan, stats, self.nodes, self.sizes)
        self.sources = [n for n in self.nodes if plan.graph.node(n).kind == "source"]
        self.io = {}

    def __call__(self, assignment, groups, cache_site):
        zeroed = cm.exclusive_ancestors(self.plan, cache_site) if cache_site is not None else set()
        grouped = set()
        total = 0.0
        for grp in groups:
            grouped.update(grp)
            live = tuple(q for q in grp if q not in zeroed)
            if not live:
                continue
            part = sum(self.cost_v[q, assignment[q]] for q in live)
            if len(live) > 1:
                if live not in self.io:
                    self.io[live] = cm.fusion_io_factor(live, self.plan, self.stats, self.sizes)
                part *= self.io[live]
            total += part
        for n in self.sources:
            if n not in zeroed:
                total += cm.cost_reordered(self.plan, n, self.stats, self.nodes, self.sizes)
        for (nid, v), c in self.cost_v.items():
            if nid in zeroed or nid in grouped or assignment.get(nid, BASE_VARIANT) != v:
                continue
            total += c
        if cache_site is not None:
            total += cm.cache_read_cost(self.plan, cache_site, self.stats, self.params, self.sizes)
        return total


def fuse_and_offload_pass(plan: Plan, stats, backends, params: CostModelParams) -> tuple:
    """``(fusions, offloads, plan)`` minimizing cost over every variant assignment.

    Each assignment is scored without and, when the previous pass placed one,
    with the cache. Ties prefer fewer offloaded pipes, then fewer fusion groups,
    then enumeration order (no-cache before cache within an assignment).
    Raises PlanSpaceOverflow when the candidate count exceeds ``params.plan_cap``.
    """
    options = variant_options(plan, backends)
    n_assign = math.prod(len(o) for _, o in options)
    cache_choices = (None,) if plan.cache_site is None else (None, plan.cache_site)
    total = n_assign * len(cache_choices)
    if total > params.plan_cap:
        raise PlanSpaceOverflow(total, params.plan_cap)
    score = _Scorer(plan, stats, params, options)
    ids = [nid for nid, _ in options]
    best = None
    for idx, combo in enumerate(itertools.product(*(o for _, o in options))):
        assignment = dict(zip(ids, combo))
        offloaded = sum(1 for v in combo if not v.is_base)
        for ci, site in enumerate(cache_choices):
            groups = fusion_groups(plan, assignment, site)
            c = score(assignment, groups, site)
            key = (offloaded, len(groups), idx, ci)
            if best is None or _better(c, key, best[0], best[1]):
                best = (c, key, assignment, groups, site)
    c, _, assignment, groups, site = best
    return _finish(plan, c, assignment, groups, site, n_assign, total, "exhaustive")


def _better(c, key, best_c, best_key) -> bool:
    scale = max(abs(c), abs(best_c))
    if abs(c - best_c) <= scale * TIE_RTOL:
        return key < best_key
    return c < best_c


def _finish(plan, c, assignment, groups, site, n_assign, total, method):
    grouped = {q for g in groups for q in g}
    offloads = [(g, assignment[g[0]]) for g in groups]
    offloads += [(p, v) for p, v in assignment.items() if not v.is_base and p not in grouped]
    offloads.sort(key=lambda o: plan.graph.topo_order().index(o[0][0] if isinstance(o[0], tuple) else o[0]))
    new = plan.with_(assignment=assignment, fusion_groups=groups, cache_site=site, cost=c).note(
        "fuse_and_offload", assignments=n_assign, candidates=total, method=method,
        offloads=[(list(p) if isinstance(p, tuple) else p, v.key()) for p, v in offloads],
        fusions=[list(g) for g in groups], cache_kept=site is not None, cost=c)
    return list(groups), offloads, new


def greedy_fuse_and_offload(plan: Plan, stats, backends, params: CostModelParams) -> tuple:
    """Fallback when the assignment space is too large.

    Each pipe independently takes its cheapest variant (base on ties); the
    cache is kept or dropped by comparing the two resulting totals.
    """
    options = variant_options(plan, backends)
    score = _Scorer(plan, stats, params, options)
    assignment = {}
    for nid, opts in options:
        costs = [score.cost_v[nid, v] for v in opts]
        assignment[nid] = opts[_argmin(costs)]
    choices = (None,) if plan.cache_site is None else (None, plan.cache_site)
    scored = []
    for site in choices:
        groups = fusion_groups(plan, assignment, site)
        scored.append((score(assignment, groups, site), groups, site))
    i = _argmin([s[0] for s in scored])
    c, groups, site = scored[i]
    n_assign = math.prod(len(o) for _, o in options)
    return _finish(plan, c, assignment, groups, site, n_assign, n_assign * len(choices), "greedy")


def insert_prefetch_pass(plan: Plan) -> tuple:
    """``(prefetch pipes, plan)``: a buffer after every offloaded pipe or group and at the output."""
    g = plan.graph
    grouped = {q: grp for grp in plan.fusion_groups for q in grp}
    sites = set()
    for p in plan.offloaded:
        sites.add(grouped[p][-1] if p in grouped else p)
    sites.add(g.output_id)
    order = g.topo_order()
    sites = tuple(sorted(sites, key=order.index))
    new = plan.with_(prefetch_sites=sites)
    if plan.prefetch_sites != sites:
        new = new.note("prefetch", sites=list(sites))
    spec = TransformSpec("prefetch", (("capacity", 32),), "prefetch")
    pipes = [PipeNode(i, spec, fixed=True) for i in new.new_ids()["prefetch"]]
    return pipes, new


def estimated_throughput(plan: Plan) -> float:
    return math.inf if not plan.cost else 1.0 / plan.cost


def calculate_shards(plan: Plan, stats, params: CostModelParams) -> int:
    """One driver when a single driver is fast enough, else one per core."""
    return 1 if estimated_throughput(plan) >= params.shard_tput_threshold else params.cores


def check_stats(graph, stats, backends) -> None:
    pooled = [b.variant() for b in backends if b.kind != CACHE_READ]
    wanted = {n.id: pooled for n in graph.nodes if n.offloadable}
    missing = stats.missing(graph, wanted)
    if missing:
        raise MissingStats("insufficient statistics: " + ", ".join(missing))


def optimize(graph, stats, backends=(), params: Optional[CostModelParams] = None) -> Plan:
    """Apply reorder, cache, fuse-and-offload, prefetch and shard passes in turn."""
    params = params or CostModelParams()
    check_stats(graph, stats, backends)
    plan = Plan.baseline(graph)
    plan = plan.with_(cost=reorder_cost(plan, stats)).note("baseline", cost=reorder_cost(plan, stats))
    plan = reorder_pass(plan, stats, params)
    _, plan = insert_cache_pass(plan, stats, params)
    try:
        _, _, plan = fuse_and_offload_pass(plan, stats, backends, params)
    except PlanSpaceOverflow as exc:
        plan = plan.note("fuse_and_offload_overflow", candidates=exc.count, cap=exc.cap)
        _, _, plan = greedy_fuse_and_offload(plan, stats, backends, params)
    _, plan = insert_prefetch_pass(plan)
    shards = calculate_shards(plan, stats, params)
    return plan.with_(shards=shards).note(
        "shards", estimated_throughput=estimated_throughput(plan), threshold=params.shard_tput_threshold,
        shards=shards)
