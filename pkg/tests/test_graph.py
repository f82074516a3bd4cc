import itertools

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from helpers import chain, epoch_ids
from sluice import transforms
from sluice.errors import AlreadyBound, DuplicateTag, EmptyDataset, NotAPermutation, SpecFileError, UnknownTransform
from sluice.graph import (
    DirectorySource,
    LogicalGraph,
    PipeNode,
    Step,
    SyntheticSource,
    TransformSpec,
    attach_source,
    compose,
    constraint_relation,
    derive_seed,
    is_permissible,
    linear_extensions,
    parse_spec,
    reordered,
    validate,
)
from sluice.graph.sample import DataSample, split_of
from sluice.runtime.dataset import DataSet, RuntimeConfig
from sluice.optimizer import enumerate_reorderings


def image_chain():
    return compose([
        Step.of("decode"),
        Step.of("crop", frac=0.5).randomize(),
        Step.of("flip").randomize(),
        Step.of("to_float"),
        Step.of("normalize"),
    ])


def codes(violations):
    return {v.code for v in violations}


# compose ---------------------------------------------------------------------

def test_compose_image_chain():
    g = image_chain()
    pipes = [n for n in g.nodes if n.kind != "source"]
    assert len(pipes) == 5
    assert [n.id for n in g.nodes if n.random] == [2, 3]
    assert g.edges == ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5))
    assert validate(g) == []


def test_compose_single_source_is_also_output():
    g = compose([Step(TransformSpec.make("source"))])
    assert len(g.nodes) == 1
    assert g.source_ids == (0,) and g.output_id == 0


def test_compose_batches_record_arity():
    g = compose([Step.of("decode"), Step.of("batch", size=4), Step.of("identity"), Step.of("batch", size=2)])
    assert validate(g) == []
    arities = [(n.spec.arity_in, n.spec.arity_out) for n in g.nodes[1:]]
    assert arities == [("one", "one"), ("many", "one"), ("one", "one"), ("many", "one")]


def test_compose_errors():
    with pytest.raises(UnknownTransform):
        compose([Step(TransformSpec("nope"))])
    with pytest.raises(DuplicateTag):
        compose([Step.of("decode").tag("x"), Step.of("flip").tag("x")])


# attach_source -------------------------------------------------------------

def test_directory_source_splits(tmp_path):
    for i in range(10):
        (tmp_path / f"f{i:02d}").write_bytes(bytes([i]) * (i + 1))
    src = DirectorySource(str(tmp_path), split_size=4)
    g = attach_source(compose([Step.of("identity")]), src)
    assert len(src) == 10
    assert [list(src.split_members(k)) for k in range(src.n_splits)] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    with DataSet(g, config=RuntimeConfig(batch_size=3)) as ds:
        samples = [s for b in ds for s in b.samples]
    assert sorted(s.sample_id[1] for s in samples) == list(range(10))
    for s in samples:
        assert s.split_id == s.sample_id[1] // 4
        assert s.payload == bytes([s.sample_id[1]]) * (s.sample_id[1] + 1)


def test_attach_errors():
    g = compose([Step.of("identity")])
    with pytest.raises(EmptyDataset):
        attach_source(g, SyntheticSource(0))
    bound = attach_source(g, SyntheticSource(4))
    with pytest.raises(AlreadyBound):
        attach_source(bound, SyntheticSource(4))
    with pytest.raises(AlreadyBound):
        attach_source(bound, SyntheticSource(4), source_id=0)


def test_synthetic_source_is_deterministic():
    a, b = SyntheticSource(5, size=32, seed=3), SyntheticSource(5, size=32, seed=3)
    assert [a.read(i) for i in range(5)] == [b.read(i) for i in range(5)]
    assert a.read(0) != SyntheticSource(5, size=32, seed=4).read(0)


# validate ----------------------------------------------------------------------

def test_validate_unresolved_tag():
    g = compose([Step.of("decode").tag("a"), Step.of("flip").tag("b").depends_on(["missing"]), Step.of("crop")])
    assert "UnresolvedTag" in codes(validate(g))


def test_validate_cycle():
    n = [PipeNode(0, TransformSpec.make("source")), PipeNode(1, TransformSpec.make("decode")),
         PipeNode(2, TransformSpec.make("flip"))]
    g = LogicalGraph(tuple(n), ((0, 1), (1, 2), (2, 1)))
    assert "Cycle" in codes(validate(g))


def test_validate_never_raises_on_garbage():
    assert codes(validate(LogicalGraph((), ()))) == {"Empty"}
    assert codes(validate(LogicalGraph((object(),), ()))) == {"Malformed"}
    n = [PipeNode(0, TransformSpec.make("source")), PipeNode(1, TransformSpec.make("decode"))]
    assert "DanglingEdge" in codes(validate(LogicalGraph(tuple(n), ((0, 1), (1, 7)))))


def test_validate_structural_rules():
    src = TransformSpec.make("source")
    n = [PipeNode(0, src), PipeNode(1, TransformSpec.make("decode")), PipeNode(2, TransformSpec.make("flip"))]
    two_outputs = LogicalGraph(tuple(n), ((0, 1), (0, 2)))
    assert "OutputCount" in codes(validate(two_outputs))
    orphan = LogicalGraph(tuple(n), ((0, 1),))
    assert {"OutputCount", "NoInput"} <= codes(validate(orphan))
    assert validate(image_chain(), registered=[1, 99])[0].code == "Orphan"


def test_depends_on_must_be_upstream():
    g = compose([Step.of("decode").depends_on(["f"]), Step.of("flip").tag("f")])
    assert "NotAncestor" in codes(validate(g))


# constraint relation --------------------------------------------------------------

def _brute_orderings(graph, explicit):
    """Orderings of the interior pipes, filtered by the given precedence pairs."""
    src, interior = graph.nodes[0].id, [n.id for n in graph.nodes[1:]]
    out = []
    for perm in itertools.permutations(interior):
        pos = {x: i for i, x in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in explicit):
            out.append((src,) + perm)
    return out


def _permissible(graph):
    return [o for o in itertools.permutations(n.id for n in graph.nodes) if is_permissible(graph, o)]


def test_unconstrained_chain_allows_all_permutations():
    g = compose([Step.of("decode"), Step.of("flip"), Step.of("crop")])
    assert sorted(_permissible(g)) == sorted(_brute_orderings(g, []))
    assert len(_permissible(g)) == 6


def test_depends_on_keeps_three_orderings():
    g = compose([Step.of("decode").tag("a"), Step.of("flip"), Step.of("crop").depends_on(["a"])])
    assert sorted(_permissible(g)) == sorted(_brute_orderings(g, [(1, 3)]))
    assert len(_permissible(g)) == 3


def test_fixed_pipe_pins_everything():
    g = compose([Step.of("decode"), Step.of("flip").fix(), Step.of("crop")])
    assert _permissible(g) == [(0, 1, 2, 3)]


def test_permissible_count_with_two_constraints():
    g = compose([Step.of("decode").tag("a"), Step.of("flip").tag("b"), Step.of("crop").depends_on(["a"]),
                 Step.of("jitter").depends_on(["b"])])
    assert len(_permissible(g)) == len(_brute_orderings(g, [(1, 3), (2, 4)])) == 6


def test_is_permissible_basics():
    g = compose([Step.of("decode").tag("a"), Step.of("flip"), Step.of("crop").depends_on(["a"])])
    assert is_permissible(g, g.topo_order())
    assert not is_permissible(g, (0, 3, 2, 1))
    with pytest.raises(NotAPermutation):
        is_permissible(g, (0, 1, 2))


@st.composite
def constrained_chains(draw, max_pipes=6):
    n = draw(st.integers(1, max_pipes))
    steps = []
    for i in range(n):
        s = Step.of("identity").tag(f"t{i}")
        if draw(st.booleans()) and i > 0:
            s.depends_on([f"t{draw(st.integers(0, i - 1))}"])
        if draw(st.integers(0, 5)) == 0:
            s.fix()
        steps.append(s)
    return compose(steps)


@settings(max_examples=150, deadline=None)
@given(constrained_chains())
def test_constraint_relation_is_a_partial_order(g):
    rel = constraint_relation(g)
    assert all(a != b for a, b in rel)
    assert not any((b, a) in rel for a, b in rel)
    for (a, b), (c, d) in itertools.product(rel, rel):
        if b == c:
            assert (a, d) in rel
    assert is_permissible(g, g.topo_order())


@settings(max_examples=100, deadline=None)
@given(constrained_chains(max_pipes=5))
def test_linear_extensions_match_brute_force(g):
    rel = constraint_relation(g)
    ids = [n.id for n in g.nodes]
    brute = [p for p in itertools.permutations(ids) if all(p.index(a) < p.index(b) for a, b in rel)]
    assert sorted(linear_extensions(ids, rel)) == sorted(brute)


# execution-level properties ------------------------------------------------------

@pytest.mark.parametrize("name", sorted(k for k, e in transforms.REGISTRY.items() if e.fn is not None))
def test_transforms_are_stateless(name):
    fn = transforms.lookup(name).fn
    payload = bytes(range(256)) * 3
    params = {"random": True, "marker": "never-present"}
    assert fn(payload, params, 1234) == fn(payload, params, 1234)


def test_derive_seed_depends_on_every_component():
    base = derive_seed(1, 2, (0, 3), 4)
    assert base == derive_seed(1, 2, (0, 3), 4)
    variants = [derive_seed(9, 2, (0, 3), 4), derive_seed(1, 9, (0, 3), 4), derive_seed(1, 2, (1, 3), 4),
                derive_seed(1, 2, (0, 9), 4), derive_seed(1, 2, (0, 3), 9)]
    assert base not in variants
    assert 0 <= base < 2 ** 63


def test_split_of():
    assert [split_of(q, 4) for q in range(10)] == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    s = DataSample((0, 5), 1)
    assert s.dropped().tombstone and s.dropped().nbytes == 0 and s.dropped().sample_id == (0, 5)


def test_random_pipes_differ_across_epochs_but_repeat_with_the_seed():
    g = chain(Step.of("jitter").randomize(), n=16, size=32)
    with DataSet(g, config=RuntimeConfig(batch_size=4, seed=5)) as ds:
        e0 = {s.sample_id: s.payload for b in ds for s in b.samples}
        e1 = {s.sample_id: s.payload for b in ds for s in b.samples}
    with DataSet(g, config=RuntimeConfig(batch_size=4, seed=5)) as ds:
        again = {s.sample_id: s.payload for b in ds for s in b.samples}
    assert e0 == again
    assert e0 != e1


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.data())
def test_reordering_preserves_sample_ids(data):
    g = chain(Step.of("decode", factor=2).tag("d"), Step.of("drop_mod", modulus=3), Step.of("crop", frac=0.5),
              Step.of("chunk", parts=2), n=40, split_size=8)
    orders = enumerate_reorderings(g)
    order = data.draw(st.sampled_from(orders))
    with DataSet(g, config=RuntimeConfig(batch_size=5)) as ds:
        want = sorted(epoch_ids(ds))
    with DataSet(reordered(g, order), config=RuntimeConfig(batch_size=5)) as ds:
        got = epoch_ids(ds)
    assert sorted(set(got)) == sorted(set(want)) == [(0, i) for i in range(40)]


# spec files --------------------------------------------------------------------

def test_parse_spec():
    doc = {"version": 1, "pipes": [
        {"name": "decode", "params": {"factor": 2}, "tag": "d"},
        {"name": "crop", "random": True, "depends_on": ["d"]},
        {"name": "flip", "fixed": True, "size_cost_exponent": 0.5},
    ], "source": {"type": "synthetic", "n": 10, "size": 8}}
    g, src = parse_spec(doc)
    assert [n.name for n in g.nodes] == ["source", "decode", "crop", "flip"]
    assert g.node(2).random and g.node(2).depends_on == {"d"}
    assert g.node(3).fixed and g.node(3).size_cost_exponent == 0.5
    assert len(src) == 10


@pytest.mark.parametrize("doc", [
    [], {"version": 2, "pipes": [{"name": "decode"}]}, {"version": 1, "pipes": []},
    {"version": 1, "pipes": [{"params": {}}]}, {"version": 1, "pipes": [{"name": "decode", "bogus": 1}]},
])
def test_parse_spec_rejects(doc):
    with pytest.raises(SpecFileError):
        parse_spec(doc)
