import itertools

import numpy as np
import pytest

from hugat.graph import (
    REVERSE, SCHEMA, GraphConfig, HeterogeneousUrbanGraph, Node, NodeType, RelationType,
    TimeSlotSpec,
)
from hugat.metapath import BUILTIN_METAPATHS
from hugat.pipeline import city_inputs
from hugat.synthetic import SyntheticCitySpec, generate_synthetic_city

FORWARD = (
    RelationType.CONTAINS,
    RelationType.ATTRACTS_CHECKIN_AT,
    RelationType.ATTRACTS_PICKUP_AT,
    RelationType.ATTRACTS_DROPOFF_AT,
)


def toy_city(n_regions=6, n_categories=3, slots=8, seed=0, feature_dim=250, trips=200):
    """A small planted city and its graph inputs ``(city, g, adjacencies, targets)``."""
    spec = SyntheticCitySpec(
        n_regions=n_regions, n_categories=n_categories, n_landuse_types=3,
        pois_per_region=4, checkins_per_region=20, trips=trips, bike_flow_pairs=0, seed=seed,
    )
    city = generate_synthetic_city(spec)
    cfg = GraphConfig(time_slots=TimeSlotSpec(slots), feature_dim=feature_dim, seed=seed)
    g, adjs, targets = city_inputs(city.tables, cfg)
    return city, g, adjs, targets


def random_hug(rng, max_regions=8, max_categories=4, max_slots=6, density=None, m=4):
    """Arbitrary schema-valid graph with random edge sets (not built from events)."""
    n = int(rng.integers(1, max_regions + 1))
    counts = {
        NodeType.REGION: n,
        NodeType.POI_CATEGORY: int(rng.integers(1, max_categories + 1)),
        NodeType.CHECKIN_TIME: int(rng.integers(1, max_slots + 1)),
        NodeType.TRIP_ORIGIN_TIME: int(rng.integers(1, max_slots + 1)),
        NodeType.TRIP_DEST_TIME: int(rng.integers(1, max_slots + 1)),
    }
    p = rng.uniform(0.05, 0.6) if density is None else density
    edges = {rel: [] for rel in RelationType}
    for a, b in itertools.combinations_with_replacement(range(n), 2):
        if rng.random() < p:
            edges[RelationType.ADJACENT_TO].append((Node(NodeType.REGION, a), Node(NodeType.REGION, b)))
            if a != b:
                edges[RelationType.ADJACENT_TO].append((Node(NodeType.REGION, b), Node(NodeType.REGION, a)))
    for rel in FORWARD:
        st, tt = SCHEMA[rel]
        for a in range(counts[st]):
            for b in range(counts[tt]):
                if rng.random() < p:
                    edges[rel].append((Node(st, a), Node(tt, b)))
                    edges[REVERSE[rel]].append((Node(tt, b), Node(st, a)))
    return HeterogeneousUrbanGraph(
        nodes={t: range(c) for t, c in counts.items()},
        edges={rel: tuple(e) for rel, e in edges.items()},
        features={t: rng.uniform(-1, 1, size=(c, m)) for t, c in counts.items()},
    )


def enumerate_metapath_neighbors(g, mp, include_self=True):
    """Follow every typed edge sequence of ``mp`` from each region (no matrices)."""
    by_source = {}
    for rel in mp.relation_sequence:
        table = {}
        for s, t in g.edges.get(rel, ()):
            table.setdefault(s.index, []).append(t.index)
        by_source[rel] = table
    out = []
    for i in range(g.num_regions):
        frontier = {i}
        for rel in mp.relation_sequence:
            frontier = {t for s in frontier for t in by_source[rel].get(s, ())}
        if include_self:
            frontier.add(i)
        out.append(frozenset(frontier))
    return tuple(out)


def random_distributions(rng, n, k, zeros=True):
    p = rng.gamma(0.7, size=(n, k))
    if zeros:
        p[rng.random((n, k)) < 0.3] = 0.0
        empty = p.sum(1) == 0
        p[empty, rng.integers(k, size=int(empty.sum()))] = 1.0
    return p / p.sum(1, keepdims=True)


@pytest.fixture(scope="session")
def toy():
    return toy_city()


@pytest.fixture(scope="session")
def small_city():
    """30-region, 2-community city with full downstream tables."""
    spec = SyntheticCitySpec(n_regions=30, trips=3000, bike_flow_pairs=200, seed=1)
    city = generate_synthetic_city(spec)
    g, adjs, targets = city_inputs(city.tables, GraphConfig(seed=1))
    return city, g, adjs, targets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


METAPATH_NAMES = [mp.name for mp in BUILTIN_METAPATHS]
