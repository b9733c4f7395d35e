"""Region attribute distributions used as training targets.

Trip conditionals come from the origin-destination matrix; check-in and
land-use category distributions are compared pairwise with the Hellinger
distance.  Regions with no mass fall back to the uniform distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import NegativeCount, UnknownRegion

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class ConditionalTripDistributions:
    # p_org_given_dst[i, j] = p(org=i | dst=j); columns sum to 1
    p_org_given_dst: np.ndarray
    # p_dst_given_org[i, j] = p(dst=j | org=i); rows sum to 1
    p_dst_given_org: np.ndarray


@dataclass(frozen=True)
class RegionTargets:
    od: np.ndarray
    trips: ConditionalTripDistributions
    checkin_dist: np.ndarray
    landuse_dist: np.ndarray
    s_chk: np.ndarray
    s_land: np.ndarray

    @property
    def num_regions(self) -> int:
        return self.od.shape[0]

    def permuted(self, perm) -> "RegionTargets":
        """Targets for the relabelling that moves region ``i`` to ``perm[i]``."""
        inv = np.argsort(perm)
        sq = lambda a: a[np.ix_(inv, inv)]
        return RegionTargets(
            od=sq(self.od),
            trips=ConditionalTripDistributions(
                sq(self.trips.p_org_given_dst), sq(self.trips.p_dst_given_org)
            ),
            checkin_dist=self.checkin_dist[inv],
            landuse_dist=self.landuse_dist[inv],
            s_chk=sq(self.s_chk),
            s_land=sq(self.s_land),
        )


def _nonnegative(a, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise NegativeCount(f"{what} must be finite and non-negative")
    return a


def trip_conditionals(F) -> ConditionalTripDistributions:
    F = _nonnegative(F, "OD matrix")
    n = F.shape[0]
    if F.ndim != 2 or F.shape[1] != n:
        raise ValueError("OD matrix must be square")
    inbound = F.sum(axis=0)
    outbound = F.sum(axis=1)
    p_org = np.full((n, n), 1.0 / n)
    cols = inbound > 0
    p_org[:, cols] = F[:, cols] / inbound[cols]
    p_dst = np.full((n, n), 1.0 / n)
    rows = outbound > 0
    p_dst[rows] = F[rows] / outbound[rows, None]
    return ConditionalTripDistributions(p_org, p_dst)


def category_distribution(counts) -> np.ndarray:
    counts = _nonnegative(counts, "category counts")
    if counts.ndim != 2:
        raise ValueError("counts must be an N x C matrix")
    totals = counts.sum(axis=1)
    out = np.full(counts.shape, 1.0 / max(counts.shape[1], 1))
    live = totals > 0
    out[live] = counts[live] / totals[live, None]
    return out


def hellinger_matrix(p) -> np.ndarray:
    """Pairwise Hellinger distances between the rows of ``p``.

    Each unordered pair is evaluated once and mirrored, so the result is
    exactly symmetric with an exact zero diagonal.
    """
    root = np.sqrt(np.asarray(p, dtype=np.float64))
    n = root.shape[0]
    s = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    if len(iu):
        diff = root[iu] - root[ju]
        vals = np.sqrt(np.einsum("ij,ij->i", diff, diff)) / SQRT2
        s[iu, ju] = np.minimum(vals, 1.0)
        s[ju, iu] = s[iu, ju]
    return s


def od_matrix(trips: Iterable[Tuple[object, object, int, int]], n: int) -> np.ndarray:
    F = np.zeros((n, n))
    for _pu, _do, origin, dest in trips:
        o, d = int(origin), int(dest)
        if not (0 <= o < n and 0 <= d < n):
            raise UnknownRegion(f"trip between unknown regions ({o}, {d})")
        F[o, d] += 1
    return F


def checkin_counts(
    checkins: Iterable[Tuple[str, str, object]],
    pois: Sequence[Tuple[str, int, str]],
    n: int,
    categories: Sequence[str],
) -> np.ndarray:
    venue = {str(v): (int(r), str(c)) for v, r, c in pois}
    index = {c: k for k, c in enumerate(categories)}
    V = np.zeros((n, len(categories)))
    for _user, v, _ts in checkins:
        if str(v) not in venue:
            raise UnknownRegion(f"check-in at unknown venue {v!r}")
        r, c = venue[str(v)]
        V[r, index[c]] += 1
    return V


def landuse_areas(rows: Iterable[Tuple[int, str, float]], n: int):
    """Aggregate ``(region_id, landuse_type, area)`` rows into an ``N x L`` matrix."""
    rows = list(rows)
    types = sorted({str(t) for _, t, _ in rows})
    index = {t: k for k, t in enumerate(types)}
    A = np.zeros((n, len(types)))
    for r, t, area in rows:
        r = int(r)
        if not 0 <= r < n:
            raise UnknownRegion(f"land use for unknown region {r}")
        A[r, index[str(t)]] += float(area)
    return A, tuple(types)


def build_targets(F, checkin_V, landuse_A) -> RegionTargets:
    chk = category_distribution(checkin_V)
    land = category_distribution(landuse_A)
    return RegionTargets(
        od=_nonnegative(F, "OD matrix"),
        trips=trip_conditionals(F),
        checkin_dist=chk,
        landuse_dist=land,
        s_chk=hellinger_matrix(chk),
        s_land=hellinger_matrix(land),
    )


def write_matrix_csv(matrix, path, row_label="region_id", col_prefix="c") -> None:
    matrix = np.asarray(matrix)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([row_label] + [f"{col_prefix}{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(x)) for x in row])
