"""Loading, validation and serialization of the pipeline's input files.

Every tabular input is a UTF-8 CSV with a mandatory header (a BOM and CRLF
line endings are tolerated).  Loaders never raise on bad content: each data
row either becomes a record or a line-addressed :class:`Rejection`.  Only a
missing file raises.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Generic, Iterable, Sequence, TypeVar

T = TypeVar("T")

_INT_RE = re.compile(r"[+-]?\d+\Z")
_REAL_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\Z")

WALL_TYPES = ("tiled", "exposed", "other")


class FieldError(ValueError):
    """A single cell failed validation."""


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str
    field: str | None = None
    record_id: str | None = None

    def as_dict(self) -> dict:
        return {"line": self.line, "field": self.field, "record_id": self.record_id, "reason": self.reason}


@dataclass
class LoadResult(Generic[T]):
    """Accepted records plus the rejection report for one input file.

    ``n_rows`` counts non-blank data rows (or features), so that
    ``len(records) + len(rejections) == n_rows`` always holds.
    """

    records: list[T] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)
    n_rows: int = 0
    header_error: str | None = None

    @property
    def ok(self) -> bool:
        return not self.rejections and self.header_error is None


# ---------------------------------------------------------------------------
# Record types


@dataclass(frozen=True, slots=True)
class HouseholdRecord:
    household_id: str
    township_id: str
    income_bracket: int
    floors: int
    base_area_m2: float
    structure_class: int
    wall_decorated: bool
    flush_toilet: bool
    independent_kitchen: bool
    bathroom: bool
    tap_water: bool
    cooling_facility: bool
    broadband: bool
    owns_car: bool
    electricity_bill_yuan: float


@dataclass(frozen=True, slots=True)
class HouseViewRecord:
    house_id: str
    township_id: str
    floors: int | None
    quality_score: float | None
    wall_type: str | None
    has_air_conditioner: bool


@dataclass(frozen=True, slots=True)
class ImageRecord:
    image_id: str
    township_id: str
    has_car: bool
    has_motorcycle: bool


@dataclass(frozen=True, slots=True)
class HouseFootprint:
    footprint_id: str
    centroid_lon: float
    centroid_lat: float
    base_area_m2: float
    is_old_style: bool


Ring = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class TownshipBoundary:
    """Township polygon(s).

    ``rings`` is flat: every counterclockwise ring starts a new polygon part
    and the clockwise rings following it are that part's holes.
    """

    township_id: str
    county_id: str
    rings: tuple[Ring, ...]
    centroid: tuple[float, float]
    zone_id: str | None = None

    def parts(self) -> list[list[Ring]]:
        out: list[list[Ring]] = []
        for ring in self.rings:
            if signed_area(ring) > 0 or not out:
                out.append([ring])
            else:
                out[-1].append(ring)
        return out


# ---------------------------------------------------------------------------
# Cell parsers


def parse_id(s: str) -> str:
    if not s.strip():
        raise FieldError("empty identifier")
    if any("\udc80" <= ch <= "\udcff" for ch in s):
        raise FieldError("invalid UTF-8")
    return s


def parse_int(s: str) -> int:
    if not _INT_RE.match(s):
        raise FieldError(f"unparseable integer {s!r}")
    return int(s)


def parse_real(s: str) -> float:
    if not _REAL_RE.match(s):
        raise FieldError(f"unparseable real {s!r}")
    v = float(s)
    if not math.isfinite(v):
        raise FieldError(f"non-finite real {s!r}")
    return v


def parse_bool(s: str) -> bool:
    if s == "1":
        return True
    if s == "0":
        return False
    raise FieldError(f"boolean must be 0 or 1, got {s!r}")


def ordinal(lo: int, hi: int) -> Callable[[str], int]:
    def parse(s: str) -> int:
        v = parse_int(s)
        if not lo <= v <= hi:
            raise FieldError(f"ordinal out of range {lo}..{hi}")
        return v

    return parse


def int_at_least(lo: int) -> Callable[[str], int]:
    def parse(s: str) -> int:
        v = parse_int(s)
        if v < lo:
            raise FieldError(f"integer below minimum {lo}")
        return v

    return parse


def real_in(lo: float, hi: float = math.inf, what: str = "value") -> Callable[[str], float]:
    def parse(s: str) -> float:
        v = parse_real(s)
        if not lo <= v <= hi:
            if math.isinf(hi):
                raise FieldError(f"{what} below minimum {lo:g}")
            raise FieldError(f"{what} out of range")
        return v

    return parse


def optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(s: str) -> Any:
        return None if s == "" else parser(s)

    return parse


def parse_wall_type(s: str) -> str:
    if s not in WALL_TYPES:
        raise FieldError(f"wall_type must be one of {', '.join(WALL_TYPES)}")
    return s


# ---------------------------------------------------------------------------
# Schemas: column -> parser, in documented column order

HOUSEHOLD_SCHEMA: dict[str, Callable[[str], Any]] = {
    "household_id": parse_id,
    "township_id": parse_id,
    "income_bracket": ordinal(1, 5),
    "floors": int_at_least(1),
    "base_area_m2": real_in(0.0),
    "structure_class": ordinal(1, 4),
    "wall_decorated": parse_bool,
    "flush_toilet": parse_bool,
    "independent_kitchen": parse_bool,
    "bathroom": parse_bool,
    "tap_water": parse_bool,
    "cooling_facility": parse_bool,
    "broadband": parse_bool,
    "owns_car": parse_bool,
    "electricity_bill_yuan": real_in(0.0),
}

HOUSE_VIEW_SCHEMA: dict[str, Callable[[str], Any]] = {
    "house_id": parse_id,
    "township_id": parse_id,
    "floors": optional(int_at_least(1)),
    "quality_score": optional(real_in(0.0, 10.0, "quality_score")),
    "wall_type": optional(parse_wall_type),
    "has_air_conditioner": parse_bool,
}

IMAGE_SCHEMA: dict[str, Callable[[str], Any]] = {
    "image_id": parse_id,
    "township_id": parse_id,
    "has_car": parse_bool,
    "has_motorcycle": parse_bool,
}

FOOTPRINT_SCHEMA: dict[str, Callable[[str], Any]] = {
    "footprint_id": parse_id,
    "centroid_lon": real_in(-180.0, 180.0, "longitude"),
    "centroid_lat": real_in(-90.0, 90.0, "latitude"),
    "base_area_m2": real_in(0.0),
    "is_old_style": parse_bool,
}

ZONE_SCHEMA: dict[str, Callable[[str], Any]] = {
    "township_id": parse_id,
    "zone_id": parse_id,
}

NIGHTLIGHT_SCHEMA: dict[str, Callable[[str], Any]] = {
    "township_id": parse_id,
    "mean_nightlight": real_in(0.0),
}


def _decode(data: bytes) -> str:
    text = data.decode("utf-8", errors="surrogateescape")
    if text.startswith("﻿"):
        text = text[1:]
    return text


def _iter_rows(text: str) -> Iterable[tuple[int, list[str] | None, str | None]]:
    """Yield (line, cells, error) for each CSV record, surviving malformed rows."""
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    while True:
        try:
            row = next(reader)
        except StopIteration:
            return
        except csv.Error as exc:
            yield reader.line_num, None, f"malformed CSV: {exc}"
            continue
        yield reader.line_num, row, None


def load_table(
    path: str | Path,
    schema: dict[str, Callable[[str], Any]],
    build: Callable[[dict[str, Any]], T],
    id_column: str | None = None,
) -> LoadResult[T]:
    """Parse a CSV against ``schema``; ``build`` turns a parsed row into a record."""
    data = Path(path).read_bytes()
    result: LoadResult[T] = LoadResult()
    rows = _iter_rows(_decode(data))

    header: list[str] | None = None
    for line, cells, err in rows:
        if err is not None:
            result.header_error = err
            break
        if not cells:
            continue
        header = [c.strip() for c in cells]
        break
    if header is not None and result.header_error is None:
        unknown = [c for c in header if c not in schema]
        missing = [c for c in schema if c not in header]
        if unknown:
            result.header_error = f"unknown column {unknown[0]!r}"
        elif missing:
            result.header_error = f"missing column {missing[0]!r}"
        elif len(set(header)) != len(header):
            result.header_error = "duplicate column in header"
    elif header is None and result.header_error is None:
        result.header_error = "missing header row"

    seen: set[str] = set()
    for line, cells, err in rows:
        if cells is not None and not cells:
            continue
        result.n_rows += 1
        if result.header_error is not None:
            result.rejections.append(Rejection(line, result.header_error))
            continue
        if err is not None:
            result.rejections.append(Rejection(line, err))
            continue
        assert header is not None
        if len(cells) != len(header):
            result.rejections.append(
                Rejection(line, f"expected {len(header)} cells, found {len(cells)}")
            )
            continue
        values: dict[str, Any] = {}
        rejected = None
        for name, raw in zip(header, cells):
            try:
                values[name] = schema[name](raw)
            except FieldError as exc:
                rid = cells[header.index(id_column)] if id_column else None
                rejected = Rejection(line, str(exc), name, rid)
                break
        if rejected is not None:
            result.rejections.append(rejected)
            continue
        if id_column is not None:
            rid = values[id_column]
            if rid in seen:
                result.rejections.append(Rejection(line, "duplicate id", id_column, rid))
                continue
            seen.add(rid)
        result.records.append(build(values))
    return result


def load_households(path: str | Path) -> LoadResult[HouseholdRecord]:
    return load_table(path, HOUSEHOLD_SCHEMA, lambda v: HouseholdRecord(**v), "household_id")


def load_house_views(path: str | Path) -> LoadResult[HouseViewRecord]:
    return load_table(path, HOUSE_VIEW_SCHEMA, lambda v: HouseViewRecord(**v), "house_id")


def load_images(path: str | Path) -> LoadResult[ImageRecord]:
    return load_table(path, IMAGE_SCHEMA, lambda v: ImageRecord(**v), "image_id")


def load_footprints(path: str | Path) -> LoadResult[HouseFootprint]:
    return load_table(path, FOOTPRINT_SCHEMA, lambda v: HouseFootprint(**v), "footprint_id")


def load_detections(
    house_path: str | Path, image_path: str | Path, footprint_path: str | Path
) -> tuple[LoadResult[HouseViewRecord], LoadResult[ImageRecord], LoadResult[HouseFootprint]]:
    return load_house_views(house_path), load_images(image_path), load_footprints(footprint_path)


def load_zones(path: str | Path) -> LoadResult[tuple[str, str]]:
    """Nine-zone membership, one ``(township_id, zone_id)`` pair per row."""
    return load_table(path, ZONE_SCHEMA, lambda v: (v["township_id"], v["zone_id"]), "township_id")


def load_nightlight(path: str | Path) -> LoadResult[tuple[str, float]]:
    return load_table(
        path, NIGHTLIGHT_SCHEMA, lambda v: (v["township_id"], v["mean_nightlight"]), "township_id"
    )


# ---------------------------------------------------------------------------
# CSV writers (exact round-trip: reals written with repr)


def format_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_cell(v) for v in row])


def _write_records(path: str | Path, schema: dict, records: Iterable[Any]) -> None:
    cols = list(schema)
    write_table(path, cols, ([getattr(r, c) for c in cols] for r in records))


def write_households(path: str | Path, records: Iterable[HouseholdRecord]) -> None:
    _write_records(path, HOUSEHOLD_SCHEMA, records)


def write_house_views(path: str | Path, records: Iterable[HouseViewRecord]) -> None:
    _write_records(path, HOUSE_VIEW_SCHEMA, records)


def write_images(path: str | Path, records: Iterable[ImageRecord]) -> None:
    _write_records(path, IMAGE_SCHEMA, records)


def write_footprints(path: str | Path, records: Iterable[HouseFootprint]) -> None:
    _write_records(path, FOOTPRINT_SCHEMA, records)


def write_zones(path: str | Path, pairs: Iterable[tuple[str, str]]) -> None:
    write_table(path, list(ZONE_SCHEMA), pairs)


def write_nightlight(path: str | Path, pairs: Iterable[tuple[str, float]]) -> None:
    write_table(path, list(NIGHTLIGHT_SCHEMA), pairs)


# ---------------------------------------------------------------------------
# Polygon geometry helpers


def signed_area(ring: Sequence[Sequence[float]]) -> float:
    """Shoelace area of a closed ring; positive when counterclockwise."""
    x0, y0 = ring[0]
    s = 0.0
    for (xa, ya), (xb, yb) in zip(ring[:-1], ring[1:]):
        s += (xa - x0) * (yb - y0) - (xb - x0) * (ya - y0)
    return 0.5 * s


def ring_centroid(ring: Sequence[Sequence[float]]) -> tuple[float, float, float]:
    """Return (signed area, cx, cy) of a closed ring."""
    x0, y0 = ring[0]
    a = cx = cy = 0.0
    for (xa, ya), (xb, yb) in zip(ring[:-1], ring[1:]):
        xa, ya, xb, yb = xa - x0, ya - y0, xb - x0, yb - y0
        c = xa * yb - xb * ya
        a += c
        cx += (xa + xb) * c
        cy += (ya + yb) * c
    a *= 0.5
    if a == 0.0:
        return 0.0, x0, y0
    return a, cx / (6.0 * a) + x0, cy / (6.0 * a) + y0


def _is_degenerate(ring: Ring) -> bool:
    xs = [p[0] for p in ring]
    ys = [p[1] for p in ring]
    extent = (max(xs) - min(xs)) * (max(ys) - min(ys))
    return extent == 0.0 or abs(signed_area(ring)) <= 1e-12 * extent


class GeometryError(ValueError):
    pass


def _parse_ring(raw: Any) -> Ring:
    if not isinstance(raw, list) or len(raw) < 4:
        raise GeometryError("ring needs at least 4 vertices")
    pts = []
    for p in raw:
        if not isinstance(p, list) or len(p) < 2:
            raise GeometryError("malformed vertex")
        lon, lat = p[0], p[1]
        if not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in (lon, lat)):
            raise GeometryError("non-numeric coordinate")
        lon, lat = float(lon), float(lat)
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise GeometryError("non-finite coordinate")
        if not -180.0 <= lon <= 180.0:
            raise GeometryError("longitude out of range")
        if not -90.0 <= lat <= 90.0:
            raise GeometryError("latitude out of range")
        pts.append((lon, lat))
    if pts[0] != pts[-1]:
        raise GeometryError("ring not closed")
    return tuple(pts)


def normalize_polygon(polygon: Sequence[Ring]) -> list[Ring]:
    """Orient the outer ring counterclockwise and every hole clockwise."""
    out = []
    for i, ring in enumerate(polygon):
        if _is_degenerate(ring):
            raise GeometryError("degenerate ring")
        area = signed_area(ring)
        want_ccw = i == 0
        if (area > 0) != want_ccw:
            ring = tuple(reversed(ring))
        out.append(ring)
    return out


def boundary_centroid(rings: Sequence[Ring]) -> tuple[float, float]:
    total = sx = sy = 0.0
    for ring in rings:
        a, cx, cy = ring_centroid(ring)
        total += a
        sx += a * cx
        sy += a * cy
    if total == 0.0:
        return rings[0][0]
    return sx / total, sy / total


def _parse_geometry(geom: Any) -> list[Ring]:
    if not isinstance(geom, dict):
        raise GeometryError("missing geometry")
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        polygons = [coords]
    elif kind == "MultiPolygon":
        polygons = coords
    else:
        raise GeometryError(f"non-polygonal geometry {kind!r}")
    if not isinstance(polygons, list) or not polygons:
        raise GeometryError("empty geometry")
    rings: list[Ring] = []
    for poly in polygons:
        if not isinstance(poly, list) or not poly:
            raise GeometryError("polygon without rings")
        rings.extend(normalize_polygon([_parse_ring(r) for r in poly]))
    return rings


def _string_prop(props: dict, key: str, required: bool = True) -> str | None:
    v = props.get(key)
    if v is None:
        if required:
            raise GeometryError(f"missing property {key}")
        return None
    if not isinstance(v, str) or not v.strip():
        raise GeometryError(f"property {key} must be a non-empty string")
    return v


def load_boundaries(path: str | Path) -> LoadResult[TownshipBoundary]:
    """Read a township FeatureCollection; lines in rejections are feature indexes."""
    result: LoadResult[TownshipBoundary] = LoadResult()
    try:
        doc = json.loads(_decode(Path(path).read_bytes()))
    except ValueError as exc:
        result.header_error = f"invalid JSON: {exc}"
        return result
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        result.header_error = "not a GeoJSON FeatureCollection"
        return result
    features = doc.get("features")
    if not isinstance(features, list):
        result.header_error = "FeatureCollection without a features list"
        return result
    seen: set[str] = set()
    for i, feat in enumerate(features):
        result.n_rows += 1
        try:
            if not isinstance(feat, dict):
                raise GeometryError("feature is not an object")
            props = feat.get("properties")
            if not isinstance(props, dict):
                raise GeometryError("missing property township_id")
            tid = _string_prop(props, "township_id")
            cid = _string_prop(props, "county_id")
            zid = _string_prop(props, "zone_id", required=False)
            rings = _parse_geometry(feat.get("geometry"))
        except GeometryError as exc:
            rid = None
            if isinstance(feat, dict) and isinstance(feat.get("properties"), dict):
                rid = feat["properties"].get("township_id")
                rid = rid if isinstance(rid, str) else None
            result.rejections.append(Rejection(i, str(exc), None, rid))
            continue
        if tid in seen:
            result.rejections.append(Rejection(i, "duplicate id", "township_id", tid))
            continue
        seen.add(tid)
        result.records.append(
            TownshipBoundary(tid, cid, tuple(rings), boundary_centroid(rings), zid)
        )
    return result


def boundary_geometry(b: TownshipBoundary) -> dict:
    parts = b.parts()
    coords = [[[list(p) for p in ring] for ring in part] for part in parts]
    if len(coords) == 1:
        return {"type": "Polygon", "coordinates": coords[0]}
    return {"type": "MultiPolygon", "coordinates": coords}


def write_boundaries(path: str | Path, boundaries: Iterable[TownshipBoundary]) -> None:
    features = []
    for b in boundaries:
        props = {"township_id": b.township_id, "county_id": b.county_id}
        if b.zone_id is not None:
            props["zone_id"] = b.zone_id
        features.append({"type": "Feature", "properties": props, "geometry": boundary_geometry(b)})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh, separators=(",", ":"))
        fh.write("\n")
