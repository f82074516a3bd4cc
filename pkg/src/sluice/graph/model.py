"""Logical dataflow model: transform specs, pipe nodes and graphs."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Optional

from .. import transforms
from ..errors import ArityMismatch, DuplicateTag, UnknownTransform

# kinds the optimizer may move; everything else is anchored in place
REORDERABLE_KINDS = frozenset({"map", "filter"})


@dataclass(frozen=True)
class TransformSpec:
    name: str
    params: tuple = ()
    kind: str = "map"

    @classmethod
    def make(cls, name: str, **params) -> "TransformSpec":
        entry = transforms.lookup(name)
        return cls(name, tuple(params.items()), entry.kind)

    @property
    def arity_in(self) -> str:
        return transforms.ARITY[self.kind][0]

    @property
    def arity_out(self) -> str:
        return transforms.ARITY[self.kind][1]

    @cached_property
    def param_dict(self) -> dict:
        return dict(self.params)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": _jsonable_params(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformSpec":
        params = d.get("params") or {}
        if isinstance(params, Mapping):
            items = tuple(params.items())
        else:
            items = tuple((k, _unjson(v)) for k, v in params)
        kind = d.get("kind") or transforms.lookup(d["name"]).kind
        return cls(d["name"], tuple((k, _unjson(v)) for k, v in items), kind)


def _jsonable_params(params):
    out = []
    for k, v in params:
        if isinstance(v, tuple) and v and isinstance(v[0], TransformSpec):
            v = [s.to_dict() for s in v]
        elif isinstance(v, tuple):
            v = list(v)
        out.append([k, v])
    return out


def _unjson(v):
    if isinstance(v, list):
        if v and isinstance(v[0], Mapping) and "name" in v[0]:
            return tuple(TransformSpec.from_dict(s) for s in v)
        return tuple(_unjson(x) for x in v)
    return v


@dataclass(frozen=True)
class PipeNode:
    id: int
    spec: TransformSpec
    tag: Optional[str] = None
    depends_on: frozenset = frozenset()
    fixed: bool = False
    random: bool = False
    size_cost_exponent: float = 1.0

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def reorderable(self) -> bool:
        return self.kind in REORDERABLE_KINDS and not self.fixed

    @property
    def offloadable(self) -> bool:
        if self.kind == "fused":
            return all(transforms.lookup(s.name).offloadable for s in self.members_specs)
        if self.kind not in ("map", "filter", "flatten"):
            return False
        try:
            return transforms.lookup(self.name).offloadable
        except UnknownTransform:
            return False

    @property
    def fusable(self) -> bool:
        try:
            return self.offloadable and transforms.lookup(self.name).fusable
        except UnknownTransform:
            return False

    @property
    def members_specs(self) -> tuple:
        return self.spec.param_dict.get("members", ())

    @property
    def member_ids(self) -> tuple:
        return tuple(self.spec.param_dict.get("member_ids", ()))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "spec": self.spec.to_dict(),
            "tag": self.tag,
            "depends_on": sorted(self.depends_on),
            "fixed": self.fixed,
            "random": self.random,
            "size_cost_exponent": self.size_cost_exponent,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipeNode":
        return cls(
            id=int(d["id"]),
            spec=TransformSpec.from_dict(d["spec"]),
            tag=d.get("tag"),
            depends_on=frozenset(d.get("depends_on", ())),
            fixed=bool(d.get("fixed", False)),
            random=bool(d.get("random", False)),
            size_cost_exponent=float(d.get("size_cost_exponent", 1.0)),
        )


@dataclass(frozen=True)
class LogicalGraph:
    """Immutable DAG of pipes. ``bindings`` maps source ids to datasets."""

    nodes: tuple
    edges: tuple
    bindings: tuple = ()

    @cached_property
    def by_id(self) -> dict:
        return {n.id: n for n in self.nodes}

    def node(self, nid: int) -> PipeNode:
        return self.by_id[nid]

    @cached_property
    def preds(self) -> dict:
        out = {n.id: [] for n in self.nodes}
        for u, v in self.edges:
            out.setdefault(v, []).append(u)
        return out

    @cached_property
    def succs(self) -> dict:
        out = {n.id: [] for n in self.nodes}
        for u, v in self.edges:
            out.setdefault(u, []).append(v)
        return out

    @cached_property
    def source_ids(self) -> tuple:
        return tuple(n.id for n in self.nodes if n.kind == "source")

    @cached_property
    def output_id(self) -> Optional[int]:
        sinks = [n.id for n in self.nodes if not self.succs.get(n.id)]
        return sinks[0] if len(sinks) == 1 else None

    @property
    def pipe_ids(self) -> tuple:
        """Non-source node ids in topological order."""
        return tuple(i for i in self.topo_order() if self.node(i).kind != "source")

    def binding(self, source_id: int):
        return dict(self.bindings).get(source_id)

    def topo_order(self) -> tuple:
        """Kahn's algorithm, smallest id first; raises ValueError on a cycle."""
        indeg = {n.id: 0 for n in self.nodes}
        for _, v in self.edges:
            indeg[v] = indeg.get(v, 0) + 1
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order = []
        import heapq

        heapq.heapify(ready)
        while ready:
            u = heapq.heappop(ready)
            order.append(u)
            for v in self.succs.get(u, ()):
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, v)
        if len(order) != len(indeg):
            raise ValueError("graph has a cycle")
        return tuple(order)

    def ancestors(self, nid: int) -> set:
        seen, stack = set(), list(self.preds.get(nid, ()))
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self.preds.get(u, ()))
        return seen

    def descendants(self, nid: int) -> set:
        seen, stack = set(), list(self.succs.get(nid, ()))
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self.succs.get(u, ()))
        return seen

    def tags(self) -> dict:
        return {n.tag: n.id for n in self.nodes if n.tag is not None}

    def with_nodes(self, nodes: Iterable[PipeNode], edges: Iterable[tuple]) -> "LogicalGraph":
        return LogicalGraph(tuple(nodes), tuple(edges), self.bindings)

    def with_binding(self, source_id: int, binding) -> "LogicalGraph":
        b = dict(self.bindings)
        b[source_id] = binding
        return replace(self, bindings=tuple(sorted(b.items(), key=lambda kv: kv[0])))

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LogicalGraph":
        return cls(
            tuple(PipeNode.from_dict(n) for n in d["nodes"]),
            tuple((int(u), int(v)) for u, v in d["edges"]),
        )


@dataclass
class Step:
    """Builder for one chained pipe, mirroring the fluent hint API.

    >>> crop = Step.of("crop", frac=0.5).tag("c").randomize()
    """

    spec: TransformSpec
    tag_: Optional[str] = None
    depends: list = field(default_factory=list)
    fixed_: bool = False
    random_: bool = False
    exponent: float = 1.0

    @classmethod
    def of(cls, name: str, **params) -> "Step":
        return cls(TransformSpec.make(name, **params))

    def tag(self, tag: str) -> "Step":
        self.tag_ = tag
        return self

    def depends_on(self, tags: Iterable[str]) -> "Step":
        self.depends.extend(tags)
        return self

    def fix(self) -> "Step":
        self.fixed_ = True
        return self

    def randomize(self) -> "Step":
        self.random_ = True
        return self

    def cost_exponent(self, exponent: float) -> "Step":
        self.exponent = float(exponent)
        return self


def compose(steps) -> LogicalGraph:
    """Chain steps into a linear graph.

    A source placeholder (id 0) is prepended unless the first step is itself
    a source; pipes are numbered in list order after it.
    """
    steps = [s if isinstance(s, Step) else Step(s) for s in steps]
    if not steps:
        raise ArityMismatch("cannot compose an empty pipeline")
    for s in steps:
        transforms.lookup(s.spec.name)
    if steps[0].spec.kind != "source":
        steps.insert(0, Step(TransformSpec("source", (), "source")))
    nodes, seen_tags = [], set()
    for i, s in enumerate(steps):
        if i > 0 and s.spec.kind in ("source", "zip"):
            raise ArityMismatch(f"{s.spec.name!r} cannot sit at position {i} of a linear chain")
        if s.tag_ is not None:
            if s.tag_ in seen_tags:
                raise DuplicateTag(s.tag_)
            seen_tags.add(s.tag_)
        params = s.spec.params
        is_random = s.random_ or bool(s.spec.param_dict.get("random", False))
        if s.random_ and "random" not in s.spec.param_dict:
            params = params + (("random", True),)
        nodes.append(
            PipeNode(
                id=i,
                spec=replace(s.spec, params=params),
                tag=s.tag_,
                depends_on=frozenset(s.depends),
                fixed=s.fixed_,
                random=is_random,
                size_cost_exponent=s.exponent,
            )
        )
    edges = tuple((i, i + 1) for i in range(len(nodes) - 1))
    return LogicalGraph(tuple(nodes), edges)


def zip_graphs(branches: list[LogicalGraph], zip_step: Optional[Step] = None,
               tail: Iterable = ()) -> LogicalGraph:
    """Fan several linear branches into one zip node, then chain ``tail``."""
    nodes, edges, lasts, offset = [], [], [], 0
    for g in branches:
        remap = {n.id: n.id + offset for n in g.nodes}
        nodes.extend(replace(n, id=remap[n.id]) for n in g.nodes)
        edges.extend((remap[u], remap[v]) for u, v in g.edges)
        lasts.append(remap[g.output_id])
        offset += len(g.nodes)
    zid = offset
    zspec = (zip_step.spec if zip_step else TransformSpec("zip", (), "zip"))
    nodes.append(PipeNode(zid, zspec))
    edges.extend((u, zid) for u in lasts)
    prev = zid
    for s in tail:
        s = s if isinstance(s, Step) else Step(s)
        nid = len(nodes)
        nodes.append(PipeNode(nid, s.spec, s.tag_, frozenset(s.depends), s.fixed_,
                              s.random_ or bool(s.spec.param_dict.get("random", False)),
                              s.exponent))
        edges.append((prev, nid))
        prev = nid
    tags = [n.tag for n in nodes if n.tag is not None]
    if len(tags) != len(set(tags)):
        raise DuplicateTag(str(tags))
    return LogicalGraph(tuple(nodes), tuple(edges))


def attach_source(graph: LogicalGraph, source, source_id: Optional[int] = None) -> LogicalGraph:
    """Bind a dataset to a source placeholder (first unbound one by default)."""
    from ..errors import AlreadyBound, EmptyDataset

    bound = dict(graph.bindings)
    if source_id is None:
        free = [s for s in graph.source_ids if s not in bound]
        if not free:
            raise AlreadyBound("every source placeholder is already bound")
        source_id = free[0]
    elif source_id in bound:
        raise AlreadyBound(f"source {source_id} is already bound")
    if len(source) == 0:
        raise EmptyDataset(f"dataset bound to source {source_id} is empty")
    return graph.with_binding(source_id, source)


# physical rewrites shared by plans and datasets ----------------------------------

def splice_after(graph: LogicalGraph, site: int, node: PipeNode) -> LogicalGraph:
    """Insert ``node`` between ``site`` and its successors (or after it, at the output)."""
    outs = [(u, v) for u, v in graph.edges if u == site]
    edges = [e for e in graph.edges if e not in outs] + [(site, node.id)] + [(node.id, v) for _, v in outs]
    return graph.with_nodes(graph.nodes + (node,), edges)


def fused_node(graph: LogicalGraph, group, node_id: int) -> PipeNode:
    members = [graph.node(q) for q in group]
    spec = TransformSpec("fused", (("members", tuple(m.spec for m in members)),
                                   ("member_ids", tuple(group))), "fused")
    return PipeNode(node_id, spec, fixed=True, random=any(m.random for m in members))


def replace_with_fused(graph: LogicalGraph, node: PipeNode) -> LogicalGraph:
    """Swap the chain ``node.member_ids`` for the single fused ``node``."""
    group = node.member_ids
    first, last, gset = group[0], group[-1], set(group)
    edges = []
    for u, v in graph.edges:
        if u in gset and v in gset:
            continue
        edges.append((node.id if u == last else u, node.id if v == first else v))
    nodes = tuple(n for n in graph.nodes if n.id not in gset) + (node,)
    return graph.with_nodes(nodes, edges)
