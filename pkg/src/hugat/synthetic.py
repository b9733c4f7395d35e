"""Planted-community synthetic cities for desk-scale runs and tests.

Regions sit on a grid with 4-adjacency and are split into vertical stripes,
one per community.  Each community has its own POI-category profile,
land-use profile and active hours; trips prefer same-community destinations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import List, Optional

import numpy as np

from .errors import InvalidSpec
from .io import CityTables

WEEK_START = datetime(2024, 1, 1)  # a Monday


@dataclass(frozen=True)
class SyntheticCitySpec:
    n_regions: int = 300
    n_communities: int = 2
    n_categories: int = 9
    n_landuse_types: int = 6
    grid_width: Optional[int] = None
    # share of each profile spread evenly over every category; 0 keeps profiles disjoint
    profile_overlap: float = 0.0
    pois_per_region: int = 8
    checkins_per_region: int = 40
    trips: int = 20000
    # destination weight multiplier for same-community trips
    intra_gravity: float = 6.0
    distance_decay: float = 4.0
    bike_flow_pairs: int = 2000
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_regions, self.n_communities, self.n_categories, self.n_landuse_types)
        if min(counts) < 1:
            raise InvalidSpec("region, community, category and land-use counts must be >= 1")
        if self.n_communities > self.n_regions:
            raise InvalidSpec("more communities than regions")
        if min(self.pois_per_region, self.checkins_per_region, self.trips, self.bike_flow_pairs) < 0:
            raise InvalidSpec("event counts must be non-negative")
        if not 0.0 <= self.profile_overlap <= 1.0:
            raise InvalidSpec("profile_overlap must lie in [0, 1]")
        if self.intra_gravity <= 0 or self.distance_decay <= 0:
            raise InvalidSpec("gravity parameters must be positive")
        if self.grid_width is not None and self.grid_width < 1:
            raise InvalidSpec("grid_width must be >= 1")

    @property
    def width(self) -> int:
        return self.grid_width or math.ceil(math.sqrt(self.n_regions))


@dataclass
class SyntheticCity:
    tables: CityTables
    labels: np.ndarray  # planted community per region
    coords: np.ndarray  # (N, 2) grid coordinates (column, row)


def _block_profiles(n_groups: int, n_items: int, overlap: float) -> np.ndarray:
    """Row k puts ``1 - overlap`` uniformly on its own block of items."""
    prof = np.zeros((n_groups, n_items))
    for k in range(n_groups):
        lo = k * n_items // n_groups
        hi = max((k + 1) * n_items // n_groups, lo + 1)
        prof[k, lo:min(hi, n_items)] = 1.0
    prof /= prof.sum(axis=1, keepdims=True)
    return (1.0 - overlap) * prof + overlap / n_items


def _hour_profile(k: int, n_communities: int) -> np.ndarray:
    # each community is active around its own peak hour
    peak = 8 + (12 * k) // max(n_communities, 1)
    hours = np.arange(24)
    dist = np.minimum(np.abs(hours - peak), 24 - np.abs(hours - peak))
    w = np.exp(-0.5 * (dist / 2.0) ** 2)
    return w / w.sum()


def _stamp(rng, hour_p: np.ndarray) -> datetime:
    day = int(rng.integers(7))
    hour = int(rng.choice(24, p=hour_p))
    minute = int(rng.integers(60))
    return WEEK_START + timedelta(days=day, hours=hour, minutes=minute)


def generate_synthetic_city(spec: SyntheticCitySpec = SyntheticCitySpec()) -> SyntheticCity:
    rng = np.random.default_rng(spec.seed)
    n, K, width = spec.n_regions, spec.n_communities, spec.width
    cols = np.arange(n) % width
    rows = np.arange(n) // width
    coords = np.stack([cols, rows], axis=1).astype(float)
    labels = np.minimum(cols * K // min(width, n), K - 1)
    # tiny grids (fewer columns than communities) fall back to round-robin
    if len(np.unique(labels)) < K:
        labels = np.arange(n) % K

    t = CityTables()
    t.regions = [(i, f"region_{i}") for i in range(n)]
    for i in range(n):
        if cols[i] + 1 < width and i + 1 < n:
            t.adjacency.append((i, i + 1))
        if i + width < n:
            t.adjacency.append((i, i + width))

    cat_prof = _block_profiles(K, spec.n_categories, spec.profile_overlap)
    land_prof = _block_profiles(K, spec.n_landuse_types, spec.profile_overlap)
    hour_prof = [_hour_profile(k, K) for k in range(K)]
    categories = [f"cat_{c}" for c in range(spec.n_categories)]
    landuse_types = [f"land_{c}" for c in range(spec.n_landuse_types)]

    venues_of: List[List[str]] = [[] for _ in range(n)]
    for i in range(n):
        k = labels[i]
        for v in range(spec.pois_per_region):
            venue = f"v{i}_{v}"
            cat = categories[int(rng.choice(spec.n_categories, p=cat_prof[k]))]
            t.pois.append((venue, i, cat))
            venues_of[i].append(venue)
        areas = rng.gamma(2.0, 1.0, size=spec.n_landuse_types) * land_prof[k]
        for m, area in enumerate(areas):
            if area > 0:
                t.landuse.append((i, landuse_types[m], round(float(area), 6)))

    n_users = max(1, n // 3)
    for i in range(n):
        if not venues_of[i]:
            continue
        k = labels[i]
        for _ in range(spec.checkins_per_region):
            venue = venues_of[i][int(rng.integers(len(venues_of[i])))]
            user = f"u{int(rng.integers(n_users))}"
            t.checkins.append((user, venue, _stamp(rng, hour_prof[k]).isoformat()))

    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    gravity = np.where(same, spec.intra_gravity, 1.0) * np.exp(-dist / spec.distance_decay)
    dest_p = gravity / gravity.sum(axis=1, keepdims=True)
    origins = rng.integers(n, size=spec.trips)
    for o in origins:
        d = int(rng.choice(n, p=dest_p[o]))
        pickup = _stamp(rng, hour_prof[labels[o]])
        dropoff = pickup + timedelta(minutes=int(5 + 3 * dist[o, d] + rng.integers(10)))
        t.trips.append((pickup.isoformat(), dropoff.isoformat(), int(o), d))

    t.districts = [(i, f"community_{labels[i]}") for i in range(n)]
    base_crime = rng.uniform(20, 200, size=K)
    base_income = rng.uniform(20, 120, size=K)
    t.crime = [(i, round(float(base_crime[labels[i]] + rng.normal(0, 5)), 6)) for i in range(n)]
    t.income = [(i, round(float(base_income[labels[i]] + rng.normal(0, 3)), 6)) for i in range(n)]
    t.distances = [(i, j, round(float(dist[i, j]), 6)) for i in range(n) for j in range(n)]
    if n > 1 and spec.bike_flow_pairs:
        flat = gravity.copy()
        np.fill_diagonal(flat, 0.0)
        flat = flat.ravel() / flat.sum()
        size = min(spec.bike_flow_pairs, int(np.count_nonzero(flat)))
        picks = rng.choice(n * n, size=size, replace=False, p=flat)
        for idx in sorted(picks):
            i, j = divmod(int(idx), n)
            rate = 50.0 * gravity[i, j]
            t.bike_flows.append((i, j, float(rng.poisson(rate))))
    return SyntheticCity(t, labels, coords)
