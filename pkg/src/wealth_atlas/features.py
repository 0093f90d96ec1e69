"""Township aggregation of street-view detections and footprint statistics.

Absent is never zero here: a township without wall-typed houses has no
tiled-wall rate at all, and that absence is carried into the feature matrix
as NaN for the forest's imputer to fill.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .io import (
    HouseViewRecord,
    ImageRecord,
    LoadResult,
    int_at_least,
    load_table,
    optional,
    parse_id,
    parse_real,
    real_in,
    write_table,
)
from .spatial import TownshipHouseStats

FEATURE_NAMES = (
    "house_count",
    "mean_base_area_m2",
    "old_style_rate",
    "mean_floor_height",
    "mean_quality",
    "tiled_wall_rate",
    "exposed_wall_rate",
    "air_conditioning_rate",
    "car_rate",
    "motorcycle_rate",
)
NIGHTLIGHT = "mean_nightlight"


def feature_order(include_nightlight: bool = False) -> tuple[str, ...]:
    return FEATURE_NAMES + (NIGHTLIGHT,) if include_nightlight else FEATURE_NAMES


@dataclass(frozen=True)
class TownshipFeatures:
    township_id: str
    house_count: int | None = None
    mean_base_area_m2: float | None = None
    old_style_rate: float | None = None
    mean_floor_height: float | None = None
    mean_quality: float | None = None
    tiled_wall_rate: float | None = None
    exposed_wall_rate: float | None = None
    air_conditioning_rate: float | None = None
    car_rate: float | None = None
    motorcycle_rate: float | None = None
    mean_nightlight: float | None = None

    def missing_mask(self, order: Sequence[str] = FEATURE_NAMES) -> tuple[bool, ...]:
        """True where the feature is absent."""
        return tuple(getattr(self, name) is None for name in order)

    def n_present(self, order: Sequence[str] = FEATURE_NAMES) -> int:
        return sum(not m for m in self.missing_mask(order))

    def row(self, order: Sequence[str] = FEATURE_NAMES) -> list[float]:
        return [math.nan if (v := getattr(self, name)) is None else float(v) for name in order]


def rate(detections: Sequence[bool | int]) -> float | None:
    """Share of positive detections; ``None`` for an empty list."""
    if len(detections) == 0:
        return None
    return sum(1 for d in detections if d) / len(detections)


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate_house_features(views: Iterable[HouseViewRecord]) -> dict[str, TownshipFeatures]:
    """House-denominated fields per township.

    Floor and quality means use the houses where each field is present; wall
    rates use the houses with a wall type; the air-conditioning rate uses
    every house record.
    """
    floors: dict[str, list[float]] = defaultdict(list)
    quality: dict[str, list[float]] = defaultdict(list)
    walls: dict[str, list[str]] = defaultdict(list)
    ac: dict[str, list[bool]] = defaultdict(list)
    for v in views:
        ac[v.township_id].append(v.has_air_conditioner)
        if v.floors is not None:
            floors[v.township_id].append(float(v.floors))
        if v.quality_score is not None:
            quality[v.township_id].append(v.quality_score)
        if v.wall_type is not None:
            walls[v.township_id].append(v.wall_type)
    out = {}
    for tid in sorted(ac):
        w = walls.get(tid, [])
        out[tid] = TownshipFeatures(
            tid,
            mean_floor_height=_mean(floors.get(tid, [])),
            mean_quality=_mean(quality.get(tid, [])),
            tiled_wall_rate=rate([t == "tiled" for t in w]),
            exposed_wall_rate=rate([t == "exposed" for t in w]),
            air_conditioning_rate=rate(ac[tid]),
        )
    return out


def aggregate_image_features(images: Iterable[ImageRecord]) -> dict[str, TownshipFeatures]:
    """Vehicle rates per township, denominated by image count."""
    car: dict[str, list[bool]] = defaultdict(list)
    moto: dict[str, list[bool]] = defaultdict(list)
    for im in images:
        car[im.township_id].append(im.has_car)
        moto[im.township_id].append(im.has_motorcycle)
    return {
        tid: TownshipFeatures(tid, car_rate=rate(car[tid]), motorcycle_rate=rate(moto[tid]))
        for tid in sorted(car)
    }


def _partial(stats: TownshipHouseStats) -> TownshipFeatures:
    return TownshipFeatures(
        stats.township_id,
        house_count=stats.house_count,
        mean_base_area_m2=stats.mean_base_area_m2,
        old_style_rate=stats.old_style_rate,
    )


def _merge(a: TownshipFeatures, b: TownshipFeatures) -> TownshipFeatures:
    updates = {
        f.name: getattr(b, f.name)
        for f in fields(b)
        if f.name != "township_id" and getattr(b, f.name) is not None
    }
    return replace(a, **updates)


def build_feature_matrix(
    house_stats: Iterable[TownshipHouseStats],
    house_agg: Mapping[str, TownshipFeatures],
    image_agg: Mapping[str, TownshipFeatures],
    nightlight: Mapping[str, float] | None = None,
    include_nightlight: bool = False,
) -> tuple[list[TownshipFeatures], list[str]]:
    """Outer join of all sources by township id.

    Returns the rows sorted by id and the ids dropped because none of their
    features is present.
    """
    rows: dict[str, TownshipFeatures] = {}
    for s in house_stats:
        rows[s.township_id] = _partial(s)
    for source in (house_agg, image_agg):
        for tid, part in source.items():
            rows[tid] = _merge(rows.get(tid, TownshipFeatures(tid)), part)
    if include_nightlight and nightlight:
        for tid, value in nightlight.items():
            rows[tid] = replace(rows.get(tid, TownshipFeatures(tid)), mean_nightlight=value)

    order = feature_order(include_nightlight)
    kept, dropped = [], []
    for tid in sorted(rows):
        row = rows[tid]
        if not include_nightlight and row.mean_nightlight is not None:
            row = replace(row, mean_nightlight=None)
        if row.n_present(order):
            kept.append(row)
        else:
            dropped.append(tid)
    return kept, dropped


def feature_matrix(features: Sequence[TownshipFeatures], order: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    """Dense float matrix with NaN for absent cells."""
    return np.array([f.row(order) for f in features], dtype=np.float64).reshape(len(features), len(order))


# ---------------------------------------------------------------------------
# features.csv


def write_features(
    path: str | Path, features: Iterable[TownshipFeatures], include_nightlight: bool = False
) -> None:
    order = feature_order(include_nightlight)
    write_table(
        path,
        ("township_id", *order),
        ([f.township_id, *(getattr(f, name) for name in order)] for f in features),
    )


def load_features(path: str | Path) -> tuple[LoadResult[TownshipFeatures], bool]:
    """Read features.csv; also reports whether the nightlight column is present."""
    with open(path, encoding="utf-8-sig", newline="") as fh:
        header = fh.readline()
    has_nightlight = NIGHTLIGHT in [c.strip() for c in header.strip().split(",")]
    schema = {"township_id": parse_id, "house_count": optional(int_at_least(0))}
    for name in feature_order(has_nightlight)[1:]:
        schema[name] = optional(real_in(0.0, 1.0, name) if name.endswith("_rate") else parse_real)
    result = load_table(path, schema, lambda v: TownshipFeatures(**v), "township_id")
    return result, has_nightlight
