"""Heterogeneous urban graph: node/relation schema, construction and validation."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import (
    EmptyEventTable,
    InvalidFraction,
    MalformedTimestamp,
    UnknownRegion,
)


class NodeType(enum.Enum):
    REGION = "Region"
    POI_CATEGORY = "PoiCategory"
    CHECKIN_TIME = "CheckinTime"
    TRIP_ORIGIN_TIME = "TripOriginTime"
    TRIP_DEST_TIME = "TripDestTime"


class RelationType(enum.Enum):
    ADJACENT_TO = "AdjacentTo"
    CONTAINS = "Contains"
    LOCATED_IN = "LocatedIn"
    ATTRACTS_CHECKIN_AT = "AttractsCheckinAt"
    GENERATES_CHECKIN_IN = "GeneratesCheckinIn"
    ATTRACTS_PICKUP_AT = "AttractsPickupAt"
    GENERATES_PICKUP_IN = "GeneratesPickupIn"
    ATTRACTS_DROPOFF_AT = "AttractsDropoffAt"
    GENERATES_DROPOFF_IN = "GeneratesDropoffIn"

    @property
    def source_type(self) -> NodeType:
        return SCHEMA[self][0]

    @property
    def target_type(self) -> NodeType:
        return SCHEMA[self][1]

    @property
    def reverse(self) -> "RelationType":
        return REVERSE[self]


R, C = NodeType.REGION, NodeType.POI_CATEGORY
TC, TO, TD = NodeType.CHECKIN_TIME, NodeType.TRIP_ORIGIN_TIME, NodeType.TRIP_DEST_TIME

SCHEMA: Dict[RelationType, Tuple[NodeType, NodeType]] = {
    RelationType.ADJACENT_TO: (R, R),
    RelationType.CONTAINS: (R, C),
    RelationType.LOCATED_IN: (C, R),
    RelationType.ATTRACTS_CHECKIN_AT: (R, TC),
    RelationType.GENERATES_CHECKIN_IN: (TC, R),
    RelationType.ATTRACTS_PICKUP_AT: (R, TO),
    RelationType.GENERATES_PICKUP_IN: (TO, R),
    RelationType.ATTRACTS_DROPOFF_AT: (R, TD),
    RelationType.GENERATES_DROPOFF_IN: (TD, R),
}

REVERSE: Dict[RelationType, RelationType] = {
    RelationType.ADJACENT_TO: RelationType.ADJACENT_TO,
    RelationType.CONTAINS: RelationType.LOCATED_IN,
    RelationType.LOCATED_IN: RelationType.CONTAINS,
    RelationType.ATTRACTS_CHECKIN_AT: RelationType.GENERATES_CHECKIN_IN,
    RelationType.GENERATES_CHECKIN_IN: RelationType.ATTRACTS_CHECKIN_AT,
    RelationType.ATTRACTS_PICKUP_AT: RelationType.GENERATES_PICKUP_IN,
    RelationType.GENERATES_PICKUP_IN: RelationType.ATTRACTS_PICKUP_AT,
    RelationType.ATTRACTS_DROPOFF_AT: RelationType.GENERATES_DROPOFF_IN,
    RelationType.GENERATES_DROPOFF_IN: RelationType.ATTRACTS_DROPOFF_AT,
}

# relations whose edges must be mirrored by REVERSE[rel]; AdjacentTo must be symmetric
MIRRORED = (
    RelationType.ADJACENT_TO,
    RelationType.CONTAINS,
    RelationType.ATTRACTS_CHECKIN_AT,
    RelationType.ATTRACTS_PICKUP_AT,
    RelationType.ATTRACTS_DROPOFF_AT,
)


class Node(NamedTuple):
    type: NodeType
    index: int

    def __str__(self) -> str:
        return f"{self.type.value}:{self.index}"


Edge = Tuple[Node, Node]


@dataclass(frozen=True)
class TimeSlotSpec:
    """Maps timestamps onto a weekly cycle of equal-width slots.

    With the default 168 slots the index is ``weekday * 24 + hour``.
    """

    slots_per_week: int = 168

    def __post_init__(self):
        if self.slots_per_week < 1 or 10080 % self.slots_per_week:
            raise ValueError("slots_per_week must divide the 10080 minutes of a week")

    def slot(self, ts) -> int:
        ts = parse_timestamp(ts)
        minute = ts.weekday() * 1440 + ts.hour * 60 + ts.minute
        return minute * self.slots_per_week // 10080


def parse_timestamp(ts) -> datetime:
    if isinstance(ts, datetime):
        return ts
    if not isinstance(ts, str):
        raise MalformedTimestamp(f"not a timestamp: {ts!r}")
    text = ts.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        raise MalformedTimestamp(f"unparseable timestamp: {ts!r}") from None


@dataclass(frozen=True)
class GraphConfig:
    time_slots: TimeSlotSpec = field(default_factory=TimeSlotSpec)
    hotspot_k: float = 0.10
    feature_dim: int = 250
    seed: int = 0


@dataclass(frozen=True)
class HeterogeneousUrbanGraph:
    """Typed node sets, typed directed edge lists and per-type node features.

    Nodes are identified per type by a contiguous integer index; ``features``
    holds one ``(count, m)`` array per node type.
    """

    nodes: Mapping[NodeType, range]
    edges: Mapping[RelationType, Tuple[Edge, ...]]
    features: Mapping[NodeType, np.ndarray]
    region_names: Tuple[str, ...] = ()
    category_names: Tuple[str, ...] = ()

    @property
    def num_regions(self) -> int:
        return len(self.nodes[NodeType.REGION])

    @property
    def feature_dim(self) -> int:
        return self.features[NodeType.REGION].shape[1]

    def count(self, node_type: NodeType) -> int:
        return len(self.nodes[node_type])

    def edge_counts(self) -> Dict[RelationType, int]:
        return {rel: len(self.edges.get(rel, ())) for rel in RelationType}


@dataclass(frozen=True)
class Violation:
    rule: str
    relation: RelationType
    edge: Edge
    detail: str = ""

    def __str__(self) -> str:
        src, dst = self.edge
        return f"{self.rule}: {self.relation.value}({src}, {dst}) {self.detail}".rstrip()


def hotspot_filter(counts: Mapping[Tuple[int, int], float], k: float) -> set:
    """Keep the top ``ceil(k * #positive pairs)`` (region, slot) pairs by count.

    Ties are broken in favour of the lexicographically smaller (region, slot).
    """
    if not (0.0 < k <= 1.0) or math.isnan(k):
        raise InvalidFraction(f"hotspot fraction must lie in (0, 1], got {k}")
    if any(c < 0 for c in counts.values()):
        raise ValueError("counts must be non-negative")
    positive = [(key, c) for key, c in counts.items() if c > 0]
    # rounding first keeps e.g. 0.1 * 30 from ceiling to 4
    keep = math.ceil(round(k * len(positive), 9))
    positive.sort(key=lambda kv: (-kv[1], kv[0]))
    return {key for key, _ in positive[:keep]}


def _random_features(counts: Mapping[NodeType, int], m: int, seed: int):
    rng = np.random.default_rng(seed)
    # fixed draw order so each type's features depend only on the seed and counts
    return {t: rng.uniform(-1.0, 1.0, size=(counts[t], m)) for t in NodeType}


def build_hug(
    region_table: Sequence[Tuple[int, str]],
    adjacency_table: Iterable[Tuple[int, int]],
    poi_table: Iterable[Tuple[str, int, str]],
    checkin_events: Iterable[Tuple[str, str, object]],
    trip_events: Iterable[Tuple[object, object, int, int]],
    config: GraphConfig = GraphConfig(),
) -> HeterogeneousUrbanGraph:
    """Construct the heterogeneous urban graph from event tables.

    Tables are sequences of tuples with the column order of the CSV inputs:
    regions ``(id, name)``, adjacency ``(src, dst)``, pois ``(venue_id,
    region_id, category)``, check-ins ``(user, venue_id, timestamp)`` and
    trips ``(pickup_ts, dropoff_ts, origin_region, dest_region)``.
    """
    regions = sorted(region_table, key=lambda r: int(r[0]))
    if not regions:
        raise EmptyEventTable("region table is empty")
    ids = [int(r[0]) for r in regions]
    if ids != list(range(len(ids))):
        raise UnknownRegion("region ids must be the contiguous range 0..N-1")
    n = len(ids)

    def check_region(rid) -> int:
        rid = int(rid)
        if not 0 <= rid < n:
            raise UnknownRegion(f"unknown region id {rid}")
        return rid

    slots = config.time_slots
    n_slots = slots.slots_per_week

    adjacent = set()
    for src, dst in adjacency_table:
        a, b = check_region(src), check_region(dst)
        adjacent.add((a, b))
        adjacent.add((b, a))

    venue_region: Dict[str, int] = {}
    region_categories = set()
    categories = set()
    for venue, rid, category in poi_table:
        rid = check_region(rid)
        venue_region[str(venue)] = rid
        categories.add(str(category))
        region_categories.add((rid, str(category)))
    category_names = tuple(sorted(categories))
    cat_index = {c: i for i, c in enumerate(category_names)}

    checkin_pairs = set()
    for _user, venue, ts in checkin_events:
        if str(venue) not in venue_region:
            raise UnknownRegion(f"check-in at unknown venue {venue!r}")
        checkin_pairs.add((venue_region[str(venue)], slots.slot(ts)))

    pickups: Counter = Counter()
    dropoffs: Counter = Counter()
    for pickup_ts, dropoff_ts, origin, dest in trip_events:
        pickups[(check_region(origin), slots.slot(pickup_ts))] += 1
        dropoffs[(check_region(dest), slots.slot(dropoff_ts))] += 1
    hot_pickups = hotspot_filter(pickups, config.hotspot_k) if pickups else set()
    hot_dropoffs = hotspot_filter(dropoffs, config.hotspot_k) if dropoffs else set()

    edges: Dict[RelationType, List[Edge]] = {rel: [] for rel in RelationType}

    def add_pairs(rel: RelationType, pairs):
        st, tt = SCHEMA[rel]
        for a, b in sorted(pairs):
            edges[rel].append((Node(st, a), Node(tt, b)))
            if rel is not RelationType.ADJACENT_TO:
                edges[REVERSE[rel]].append((Node(tt, b), Node(st, a)))

    add_pairs(RelationType.ADJACENT_TO, adjacent)
    add_pairs(RelationType.CONTAINS, {(r, cat_index[c]) for r, c in region_categories})
    add_pairs(RelationType.ATTRACTS_CHECKIN_AT, checkin_pairs)
    add_pairs(RelationType.ATTRACTS_PICKUP_AT, hot_pickups)
    add_pairs(RelationType.ATTRACTS_DROPOFF_AT, hot_dropoffs)

    counts = {R: n, C: len(category_names), TC: n_slots, TO: n_slots, TD: n_slots}
    return HeterogeneousUrbanGraph(
        nodes={t: range(counts[t]) for t in NodeType},
        edges={rel: tuple(e) for rel, e in edges.items()},
        features=_random_features(counts, config.feature_dim, config.seed),
        region_names=tuple(str(r[1]) for r in regions),
        category_names=category_names,
    )


def validate_schema(g: HeterogeneousUrbanGraph) -> List[Violation]:
    """Return every broken graph invariant; empty iff the graph is schema-valid."""
    violations: List[Violation] = []
    regions = g.nodes.get(NodeType.REGION, range(0))
    if list(regions) != list(range(len(regions))):
        violations.append(
            Violation("NonContiguousRegions", RelationType.ADJACENT_TO, (Node(R, -1), Node(R, -1)))
        )
    present = {rel: set(g.edges.get(rel, ())) for rel in RelationType}
    for rel in RelationType:
        st, tt = SCHEMA[rel]
        for edge in g.edges.get(rel, ()):
            src, dst = edge
            if src.type is not st or dst.type is not tt:
                violations.append(
                    Violation("TypeMismatch", rel, edge, f"expected ({st.value}, {tt.value})")
                )
                continue
            for node in edge:
                if node.index not in g.nodes.get(node.type, range(0)):
                    violations.append(Violation("UnknownNode", rel, edge, f"{node} missing"))
    for rel in MIRRORED:
        rev = REVERSE[rel]
        for edge in g.edges.get(rel, ()):
            src, dst = edge
            if (dst, src) not in present[rev]:
                violations.append(Violation("MissingReverse", rel, edge, f"no {rev.value} edge"))
        if rel is RelationType.ADJACENT_TO:
            continue
        # the reverse direction must be backed by a forward edge too
        for edge in g.edges.get(rev, ()):
            src, dst = edge
            if (dst, src) not in present[rel]:
                violations.append(Violation("MissingReverse", rev, edge, f"no {rel.value} edge"))
    for t, feats in g.features.items():
        if feats.shape[0] != len(g.nodes.get(t, range(0))):
            violations.append(
                Violation("FeatureCount", RelationType.ADJACENT_TO, (Node(t, -1), Node(t, -1)),
                          f"{feats.shape[0]} feature rows for {len(g.nodes[t])} nodes")
            )
    return violations


def table1_statistics(g: HeterogeneousUrbanGraph) -> List[Tuple[str, int, int, int, int]]:
    """Rows ``(relation, #A, #B, #A-B edges, feature dim)`` in the published layout."""
    rows = [
        ("R-T_C", TC, RelationType.ATTRACTS_CHECKIN_AT),
        ("R-T_O", TO, RelationType.ATTRACTS_PICKUP_AT),
        ("R-T_D", TD, RelationType.ATTRACTS_DROPOFF_AT),
        ("R-R", R, RelationType.ADJACENT_TO),
        ("R-C", C, RelationType.CONTAINS),
    ]
    m = g.feature_dim
    return [(name, g.count(R), g.count(t), len(g.edges.get(rel, ())), m) for name, t, rel in rows]


def format_table1(g: HeterogeneousUrbanGraph) -> str:
    lines = [f"{'Relation (A-B)':<16}{'#A':>6}{'#B':>6}{'#A-B':>9}{'Feature':>9}"]
    for name, a, b, ab, m in table1_statistics(g):
        lines.append(f"{name:<16}{a:>6}{b:>6}{ab:>9}{m:>9}")
    return "\n".join(lines)
