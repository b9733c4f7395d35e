"""CSV schemas, loaders and writers for the city input tables."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import MalformedTimestamp, MissingFile, SchemaViolation
from .graph import parse_timestamp

log = logging.getLogger(__name__)

# table name -> (file name, header)
SCHEMAS: Dict[str, Tuple[str, Tuple[str, ...]]] = {
    "regions": ("regions.csv", ("id", "name")),
    "adjacency": ("adjacency.csv", ("src", "dst")),
    "pois": ("pois.csv", ("venue_id", "region_id", "category")),
    "checkins": ("checkins.csv", ("user", "venue_id", "timestamp")),
    "trips": ("trips.csv", ("pickup_ts", "dropoff_ts", "origin_region", "dest_region")),
    "landuse": ("landuse.csv", ("region_id", "landuse_type", "area")),
    "districts": ("districts.csv", ("region_id", "district")),
    "crime": ("crime.csv", ("region_id", "value")),
    "income": ("income.csv", ("region_id", "value")),
    "bike_flows": ("bike_flows.csv", ("origin_region", "dest_region", "count")),
    "distances": ("distances.csv", ("src", "dst", "distance")),
}
REQUIRED = ("regions", "adjacency", "pois", "checkins", "trips", "landuse")


@dataclass
class CityTables:
    regions: List[Tuple[int, str]] = field(default_factory=list)
    adjacency: List[Tuple[int, int]] = field(default_factory=list)
    pois: List[Tuple[str, int, str]] = field(default_factory=list)
    checkins: List[Tuple[str, str, str]] = field(default_factory=list)
    trips: List[Tuple[str, str, int, int]] = field(default_factory=list)
    landuse: List[Tuple[int, str, float]] = field(default_factory=list)
    districts: List[Tuple[int, str]] = field(default_factory=list)
    crime: List[Tuple[int, float]] = field(default_factory=list)
    income: List[Tuple[int, float]] = field(default_factory=list)
    bike_flows: List[Tuple[int, int, float]] = field(default_factory=list)
    distances: List[Tuple[int, int, float]] = field(default_factory=list)

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def row_counts(self) -> Dict[str, int]:
        return {f.name: len(getattr(self, f.name)) for f in fields(self)}

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, (fname, header) in SCHEMAS.items():
            rows = getattr(self, name)
            if not rows and name not in REQUIRED:
                continue
            with (directory / fname).open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def _int(x: str) -> int:
    return int(x)


def _float(x: str) -> float:
    v = float(x)
    if not math.isfinite(v):
        raise ValueError("non-finite")
    return v


def _nonneg(x: str) -> float:
    v = _float(x)
    if v < 0:
        raise ValueError("negative")
    return v


def _text(x: str) -> str:
    if x == "":
        raise ValueError("empty")
    return x


def _timestamp(x: str) -> str:
    parse_timestamp(x)
    return x


PARSERS: Dict[str, Tuple[Callable, ...]] = {
    "regions": (_int, str),
    "adjacency": (_int, _int),
    "pois": (_text, _int, _text),
    "checkins": (str, _text, _timestamp),
    "trips": (_timestamp, _timestamp, _int, _int),
    "landuse": (_int, _text, _nonneg),
    "districts": (_int, _text),
    "crime": (_int, _float),
    "income": (_int, _float),
    "bike_flows": (_int, _int, _nonneg),
    "distances": (_int, _int, _nonneg),
}
# columns holding region ids, per table
REGION_COLUMNS = {
    "adjacency": (0, 1), "pois": (1,), "trips": (2, 3), "landuse": (0,), "districts": (0,),
    "crime": (0,), "income": (0,), "bike_flows": (0, 1), "distances": (0, 1),
}


def read_table(name: str, path, region_count: Optional[int] = None,
               venues: Optional[set] = None) -> list:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{name}: {path} does not exist")
    header = SCHEMAS[name][1]
    parsers = PARSERS[name]
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != header:
            raise SchemaViolation(f"expected header {','.join(header)}", path, 1)
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise SchemaViolation(f"expected {len(header)} fields, got {len(raw)}", path, lineno)
            try:
                row = tuple(p(v.strip()) for p, v in zip(parsers, raw))
            except MalformedTimestamp as exc:
                raise SchemaViolation(str(exc), path, lineno) from None
            except ValueError as exc:
                raise SchemaViolation(f"bad value ({exc})", path, lineno) from None
            if region_count is not None:
                for col in REGION_COLUMNS.get(name, ()):
                    if not 0 <= row[col] < region_count:
                        raise SchemaViolation(f"unknown region id {row[col]}", path, lineno)
            if venues is not None and name == "checkins" and row[1] not in venues:
                raise SchemaViolation(f"unknown venue {row[1]!r}", path, lineno)
            rows.append(row)
    log.info("read %d rows from %s", len(rows), path)
    return rows


def load_tables(paths: Mapping[str, Optional[str]]) -> CityTables:
    """Load and validate every table named in ``paths`` (name -> file path)."""
    for name in REQUIRED:
        if not paths.get(name):
            raise MissingFile(f"no path configured for required table {name!r}")
    regions = read_table("regions", paths["regions"])
    ids = sorted(r[0] for r in regions)
    if ids != list(range(len(ids))):
        raise SchemaViolation("region ids must be the contiguous range 0..N-1", paths["regions"])
    n = len(regions)
    tables = CityTables(regions=sorted(regions))
    tables.pois = read_table("pois", paths["pois"], n)
    venues = {p[0] for p in tables.pois}
    for name in SCHEMAS:
        if name in ("regions", "pois") or not paths.get(name):
            continue
        setattr(tables, name, read_table(name, paths[name], n, venues))
    return tables


def table_paths(directory, names: Sequence[str] = tuple(SCHEMAS)) -> Dict[str, Optional[str]]:
    """Conventional file locations inside ``directory``; optional tables only if present."""
    directory = Path(directory)
    out = {}
    for name in names:
        p = directory / SCHEMAS[name][0]
        if name in REQUIRED or p.exists():
            out[name] = str(p)
    return out
