"""Footprint-to-township assignment and per-township footprint statistics.

Geometry is planar lon/lat.  The point-in-polygon test is even-odd ray
casting toward +x with a half-open edge rule: an edge counts when exactly
one endpoint lies strictly above the ray, and the crossing must lie strictly
right of the point.  For an axis-aligned cell this makes the region
``[x0, x1) x [y0, y1)``, so a grid of adjacent cells partitions the plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .io import HouseFootprint, TownshipBoundary, write_table


def point_in_rings(px: float, py: float, rings: Iterable[Sequence[tuple[float, float]]]) -> bool:
    inside = False
    for ring in rings:
        for (xa, ya), (xb, yb) in zip(ring[:-1], ring[1:]):
            if (ya > py) != (yb > py):
                if px < (xb - xa) * (py - ya) / (yb - ya) + xa:
                    inside = not inside
    return inside


def _edges(rings: Sequence[Sequence[tuple[float, float]]]) -> np.ndarray:
    segs = []
    for ring in rings:
        r = np.asarray(ring, dtype=np.float64)
        segs.append(np.hstack([r[:-1], r[1:]]))
    return np.vstack(segs)


def points_in_edges(px: np.ndarray, py: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Vectorized twin of :func:`point_in_rings`; identical arithmetic per point."""
    inside = np.zeros(px.shape, dtype=bool)
    for xa, ya, xb, yb in edges:
        straddle = (ya > py) != (yb > py)
        if not straddle.any():
            continue
        sel = np.flatnonzero(straddle)
        xint = (xb - xa) * (py[sel] - ya) / (yb - ya) + xa
        hit = sel[px[sel] < xint]
        inside[hit] = ~inside[hit]
    return inside


@dataclass
class SpatialIndex:
    """Uniform grid over township bounding boxes; immutable once built."""

    township_ids: list[str]
    boundaries: list[TownshipBoundary]
    bboxes: np.ndarray  # (m, 4): minx, miny, maxx, maxy
    origin: tuple[float, float]
    cell: tuple[float, float]
    shape: tuple[int, int]  # (nx, ny)
    cells: dict[tuple[int, int], list[int]]
    edges: list[np.ndarray] = field(repr=False)

    def cell_of(self, lon: float, lat: float) -> tuple[int, int]:
        nx, ny = self.shape
        i = int((lon - self.origin[0]) / self.cell[0]) if self.cell[0] > 0 else 0
        j = int((lat - self.origin[1]) / self.cell[1]) if self.cell[1] > 0 else 0
        return min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)

    def candidates(self, lon: float, lat: float) -> list[int]:
        """Townships whose bounding box contains the point (indexes, ascending)."""
        if not self.township_ids:
            return []
        out = []
        for t in self.cells.get(self.cell_of(lon, lat), ()):
            x0, y0, x1, y1 = self.bboxes[t]
            if x0 <= lon <= x1 and y0 <= lat <= y1:
                out.append(t)
        return out


def build_index(boundaries: Sequence[TownshipBoundary]) -> SpatialIndex:
    ordered = sorted(boundaries, key=lambda b: b.township_id)
    m = len(ordered)
    bboxes = np.zeros((m, 4))
    for k, b in enumerate(ordered):
        pts = np.vstack([np.asarray(r) for r in b.rings])
        bboxes[k] = [pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()]
    if m == 0:
        return SpatialIndex([], [], bboxes, (0.0, 0.0), (1.0, 1.0), (1, 1), {}, [])

    minx, miny = bboxes[:, 0].min(), bboxes[:, 1].min()
    maxx, maxy = bboxes[:, 2].max(), bboxes[:, 3].max()
    side = max(1, int(math.ceil(math.sqrt(m))))
    nx = ny = side
    cw = (maxx - minx) / nx
    ch = (maxy - miny) / ny
    index = SpatialIndex(
        [b.township_id for b in ordered], ordered, bboxes, (minx, miny), (cw, ch), (nx, ny), {},
        [_edges(b.rings) for b in ordered],
    )
    for k in range(m):
        i0, j0 = index.cell_of(bboxes[k, 0], bboxes[k, 1])
        i1, j1 = index.cell_of(bboxes[k, 2], bboxes[k, 3])
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                index.cells.setdefault((i, j), []).append(k)
    return index


def claims(index: SpatialIndex, lon: float, lat: float) -> list[str]:
    """Every township whose polygon contains the point, by ascending id."""
    return [
        index.township_ids[t]
        for t in index.candidates(lon, lat)
        if point_in_rings(lon, lat, index.boundaries[t].rings)
    ]


def assign_township(index: SpatialIndex, footprint: HouseFootprint) -> str | None:
    hit = claims(index, footprint.centroid_lon, footprint.centroid_lat)
    return hit[0] if hit else None


@dataclass
class Assignment:
    """Township per footprint (aligned with the input list) plus overlap events."""

    township_of: list[str | None]
    conflicts: list[tuple[str, list[str]]]

    @property
    def unassigned(self) -> int:
        return sum(t is None for t in self.township_of)


def assign_footprints(index: SpatialIndex, footprints: Sequence[HouseFootprint]) -> Assignment:
    """Batch assignment; same answers as :func:`assign_township` per footprint."""
    n = len(footprints)
    px = np.fromiter((f.centroid_lon for f in footprints), dtype=np.float64, count=n)
    py = np.fromiter((f.centroid_lat for f in footprints), dtype=np.float64, count=n)
    winner = np.full(n, -1, dtype=np.int64)
    n_claims = np.zeros(n, dtype=np.int64)
    extra: dict[int, list[int]] = {}
    if n and index.township_ids:
        nx, ny = index.shape
        ci = np.zeros(n, dtype=np.int64) if index.cell[0] <= 0 else ((px - index.origin[0]) / index.cell[0]).astype(np.int64)
        cj = np.zeros(n, dtype=np.int64) if index.cell[1] <= 0 else ((py - index.origin[1]) / index.cell[1]).astype(np.int64)
        # float->int truncation toward zero, matching int() in SpatialIndex.cell_of
        ci = np.clip(ci, 0, nx - 1)
        cj = np.clip(cj, 0, ny - 1)
        flat = ci * ny + cj
        order = np.argsort(flat, kind="stable")
        starts = np.searchsorted(flat[order], np.arange(nx * ny + 1))
        for (i, j), members in sorted(index.cells.items()):
            pts = order[starts[i * ny + j]: starts[i * ny + j + 1]]
            if pts.size == 0:
                continue
            for t in members:
                x0, y0, x1, y1 = index.bboxes[t]
                sub = pts[(px[pts] >= x0) & (px[pts] <= x1) & (py[pts] >= y0) & (py[pts] <= y1)]
                if sub.size == 0:
                    continue
                hit = sub[points_in_edges(px[sub], py[sub], index.edges[t])]
                for p in hit[n_claims[hit] > 0]:
                    extra.setdefault(int(p), []).append(t)
                fresh = hit[n_claims[hit] == 0]
                winner[fresh] = t
                n_claims[hit] += 1

    ids = index.township_ids
    township_of = [ids[w] if w >= 0 else None for w in winner.tolist()]
    conflicts = []
    for p in sorted(extra):
        claimed = sorted({int(winner[p]), *extra[p]})
        winner[p] = claimed[0]
        township_of[p] = ids[claimed[0]]
        conflicts.append((footprints[p].footprint_id, [ids[t] for t in claimed]))
    return Assignment(township_of, conflicts)


@dataclass(frozen=True)
class TownshipHouseStats:
    township_id: str
    house_count: int
    mean_base_area_m2: float | None
    old_style_rate: float | None


def township_house_stats(
    assignment: Assignment | Sequence[str | None],
    footprints: Sequence[HouseFootprint],
    township_ids: Iterable[str] = (),
) -> list[TownshipHouseStats]:
    """Count, mean base area and old-style rate per township.

    ``township_ids`` lists townships to report even with no footprints.
    Sums use :func:`math.fsum`, so results do not depend on input order.
    """
    owners = assignment.township_of if isinstance(assignment, Assignment) else assignment
    areas: dict[str, list[float]] = {t: [] for t in township_ids}
    old: dict[str, int] = {t: 0 for t in areas}
    for tid, fp in zip(owners, footprints):
        if tid is None:
            continue
        areas.setdefault(tid, []).append(fp.base_area_m2)
        old[tid] = old.get(tid, 0) + int(fp.is_old_style)
    out = []
    for tid in sorted(areas):
        n = len(areas[tid])
        if n == 0:
            out.append(TownshipHouseStats(tid, 0, None, None))
        else:
            out.append(TownshipHouseStats(tid, n, math.fsum(areas[tid]) / n, old[tid] / n))
    return out


HOUSE_STATS_COLUMNS = ("township_id", "house_count", "mean_base_area_m2", "old_style_rate")


def write_house_stats(path: str | Path, stats: Iterable[TownshipHouseStats]) -> None:
    write_table(
        path,
        HOUSE_STATS_COLUMNS,
        ([s.township_id, s.house_count, s.mean_base_area_m2, s.old_style_rate] for s in stats),
    )


def write_conflicts(path: str | Path, assignment: Assignment) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fid, tids in assignment.conflicts:
            fh.write(f"overlap footprint={fid} claimed_by={','.join(tids)} assigned={tids[0]}\n")
