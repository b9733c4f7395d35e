"""Meta-path definitions and meta-path based region neighbourhoods."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import FrozenSet, List, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import SchemaMismatch
from .graph import SCHEMA, HeterogeneousUrbanGraph, NodeType, RelationType

Rel = RelationType


@dataclass(frozen=True)
class MetaPath:
    name: str
    node_sequence: Tuple[NodeType, ...]
    relation_sequence: Tuple[RelationType, ...]

    def __post_init__(self):
        nodes, rels = self.node_sequence, self.relation_sequence
        if len(rels) != len(nodes) - 1 or not rels:
            raise SchemaMismatch(f"{self.name}: need len(nodes) - 1 >= 1 relations")
        if nodes[0] is not NodeType.REGION or nodes[-1] is not NodeType.REGION:
            raise SchemaMismatch(f"{self.name}: meta-paths must start and end at Region")
        for i, rel in enumerate(rels):
            if SCHEMA[rel] != (nodes[i], nodes[i + 1]):
                raise SchemaMismatch(
                    f"{self.name}: step {i} {rel.value} does not connect "
                    f"{nodes[i].value} -> {nodes[i + 1].value}"
                )

    @classmethod
    def via(cls, name: str, middle: NodeType, out: RelationType) -> "MetaPath":
        """Region -out-> middle -reverse(out)-> Region."""
        return cls(name, (NodeType.REGION, middle, NodeType.REGION), (out, out.reverse))


RR = MetaPath("RR", (NodeType.REGION, NodeType.REGION), (Rel.ADJACENT_TO,))
RCR = MetaPath.via("RCR", NodeType.POI_CATEGORY, Rel.CONTAINS)
RTOR = MetaPath.via("RT_OR", NodeType.TRIP_ORIGIN_TIME, Rel.ATTRACTS_PICKUP_AT)
RTDR = MetaPath.via("RT_DR", NodeType.TRIP_DEST_TIME, Rel.ATTRACTS_DROPOFF_AT)
RTCR = MetaPath.via("RT_CR", NodeType.CHECKIN_TIME, Rel.ATTRACTS_CHECKIN_AT)

BUILTIN_METAPATHS: Tuple[MetaPath, ...] = (RR, RCR, RTOR, RTDR, RTCR)
METAPATHS_BY_NAME = {mp.name: mp for mp in BUILTIN_METAPATHS}


@dataclass(frozen=True)
class MetaPathAdjacency:
    """Region neighbour sets for one meta-path (unweighted, set-valued)."""

    metapath: MetaPath
    neighbor_sets: Tuple[FrozenSet[int], ...]
    include_self: bool

    @property
    def num_regions(self) -> int:
        return len(self.neighbor_sets)

    def mask(self) -> np.ndarray:
        """Dense boolean ``N x N`` matrix with ``mask[i, j]`` iff ``j`` in ``N_i`` (read-only)."""
        return self._mask

    @cached_property
    def _mask(self) -> np.ndarray:
        n = self.num_regions
        out = np.zeros((n, n), dtype=bool)
        for i, nbrs in enumerate(self.neighbor_sets):
            out[i, list(nbrs)] = True
        out.setflags(write=False)
        return out

    @cached_property
    def csr(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(rows, cols, indptr)`` of the neighbour pairs, sorted by row then column."""
        rows, cols = np.nonzero(self._mask)
        indptr = np.concatenate([[0], np.cumsum([len(s) for s in self.neighbor_sets])])
        return rows, cols, indptr

    @property
    def density(self) -> float:
        n = self.num_regions
        return sum(len(s) for s in self.neighbor_sets) / (n * n) if n else 0.0

    def pairs(self) -> List[Tuple[int, int]]:
        return [(i, j) for i, nbrs in enumerate(self.neighbor_sets) for j in sorted(nbrs)]

    def relabel(self, perm) -> "MetaPathAdjacency":
        """Adjacency of the graph whose region ``i`` becomes ``perm[i]``."""
        new = [None] * self.num_regions
        for i, nbrs in enumerate(self.neighbor_sets):
            new[perm[i]] = frozenset(int(perm[j]) for j in nbrs)
        return MetaPathAdjacency(self.metapath, tuple(new), self.include_self)


def incidence_matrix(g: HeterogeneousUrbanGraph, rel: RelationType) -> sp.csr_matrix:
    st, tt = SCHEMA[rel]
    edges = g.edges.get(rel, ())
    rows = [s.index for s, _ in edges]
    cols = [t.index for _, t in edges]
    data = np.ones(len(edges), dtype=np.int64)
    m = sp.csr_matrix((data, (rows, cols)), shape=(g.count(st), g.count(tt)))
    m.data[:] = 1
    return m


def _check_against_graph(g: HeterogeneousUrbanGraph, mp: MetaPath):
    for rel in mp.relation_sequence:
        st, tt = SCHEMA[rel]
        for s, t in g.edges.get(rel, ()):
            if s.type is not st or t.type is not tt:
                raise SchemaMismatch(f"{rel.value} edge ({s}, {t}) violates the schema")


def compose_adjacency(
    g: HeterogeneousUrbanGraph, mp: MetaPath, include_self: bool = True
) -> MetaPathAdjacency:
    """Regions reachable from each region by one instance of ``mp``.

    Built as the boolean product of the per-relation incidence matrices.
    """
    _check_against_graph(g, mp)
    reach = None
    for rel in mp.relation_sequence:
        step = incidence_matrix(g, rel)
        reach = step if reach is None else reach @ step
        reach.data[:] = 1  # keep the product boolean; path counts are irrelevant
    reach = reach.tocsr()
    reach.eliminate_zeros()
    n = g.num_regions
    sets = []
    for i in range(n):
        nbrs = set(reach.indices[reach.indptr[i]:reach.indptr[i + 1]].tolist())
        if include_self:
            nbrs.add(i)
        sets.append(frozenset(nbrs))
    return MetaPathAdjacency(mp, tuple(sets), include_self)


def all_builtin_adjacencies(g: HeterogeneousUrbanGraph) -> List[MetaPathAdjacency]:
    return [compose_adjacency(g, mp, include_self=True) for mp in BUILTIN_METAPATHS]


def write_adjacency_csv(adj: MetaPathAdjacency, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        w.writerows(adj.pairs())
