import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hugat.errors import SchemaMismatch
from hugat.graph import HeterogeneousUrbanGraph, Node, NodeType, RelationType
from hugat.metapath import (
    BUILTIN_METAPATHS, RCR, RR, MetaPath, all_builtin_adjacencies, compose_adjacency,
    write_adjacency_csv,
)

from conftest import enumerate_metapath_neighbors, random_hug

R, C = NodeType.REGION, NodeType.POI_CATEGORY


def test_builtin_names_and_order():
    assert [mp.name for mp in BUILTIN_METAPATHS] == ["RR", "RCR", "RT_OR", "RT_DR", "RT_CR"]


def test_ill_typed_metapath_rejected():
    with pytest.raises(SchemaMismatch):
        MetaPath("bad", (R, C, R), (RelationType.CONTAINS, RelationType.CONTAINS))
    with pytest.raises(SchemaMismatch):
        MetaPath("bad", (R, C), (RelationType.CONTAINS,))


def test_shared_category_links_regions(toy):
    _, g, _, _ = toy
    adj = compose_adjacency(g, RCR)
    cats = {}
    for s, t in g.edges[RelationType.CONTAINS]:
        cats.setdefault(s.index, set()).add(t.index)
    for i in range(g.num_regions):
        for j in range(g.num_regions):
            shared = bool(cats.get(i, set()) & cats.get(j, set()))
            assert (j in adj.neighbor_sets[i]) == (shared or i == j)


def test_self_loops_optional(toy):
    _, g, _, _ = toy
    with_self = compose_adjacency(g, RR)
    without = compose_adjacency(g, RR, include_self=False)
    for i, (a, b) in enumerate(zip(with_self.neighbor_sets, without.neighbor_sets)):
        assert i in a
        assert a - {i} == b - {i}


def test_mask_and_csr_agree(toy):
    _, g, _, _ = toy
    for adj in all_builtin_adjacencies(g):
        mask = adj.mask()
        rows, cols, indptr = adj.csr
        assert mask.sum() == len(rows) == indptr[-1]
        assert np.all(mask[rows, cols])
        assert adj.density == pytest.approx(mask.mean())
        with pytest.raises(ValueError):
            mask[0, 0] = False


def test_relabel_is_consistent(toy, rng):
    _, g, adjs, _ = toy
    perm = rng.permutation(g.num_regions)
    for adj in adjs:
        moved = adj.relabel(perm)
        M, P = adj.mask(), moved.mask()
        assert np.array_equal(P[np.ix_(perm, perm)], M)


def test_writes_pairs(tmp_path, toy):
    _, g, adjs, _ = toy
    path = tmp_path / "rr.csv"
    write_adjacency_csv(adjs[0], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "src,dst"
    assert len(lines) - 1 == len(adjs[0].pairs())


def test_wrongly_typed_edges_raise():
    g = HeterogeneousUrbanGraph(
        nodes={t: range(2) for t in NodeType},
        edges={RelationType.CONTAINS: ((Node(R, 0), Node(R, 1)),)},
        features={t: np.zeros((2, 1)) for t in NodeType},
    )
    with pytest.raises(SchemaMismatch):
        compose_adjacency(g, RCR)


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_compose_matches_path_enumeration(seed):
    g = random_hug(np.random.default_rng(seed))
    for mp in BUILTIN_METAPATHS:
        for include_self in (True, False):
            got = compose_adjacency(g, mp, include_self).neighbor_sets
            assert got == enumerate_metapath_neighbors(g, mp, include_self)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_symmetric_metapaths_give_symmetric_masks(seed):
    g = random_hug(np.random.default_rng(seed))
    for adj in all_builtin_adjacencies(g):
        M = adj.mask()
        assert np.array_equal(M, M.T)
        assert np.all(np.diag(M))
