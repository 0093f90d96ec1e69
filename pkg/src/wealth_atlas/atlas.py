"""National prediction and the regional analytics built on it."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import FEATURE_NAMES, TownshipFeatures, feature_matrix
from .forest import ForestModel
from .io import GeometryError, LoadResult, Rejection, TownshipBoundary, _decode, boundary_geometry
from .labels import TownshipLabels

INDEX = "composite_index"
VARIANTS = ("predicted", "blended")

TABLE_LABELS = {
    INDEX: "Composite Wealth Index",
    "house_count": "Number of Houses",
    "mean_base_area_m2": "Building Base Area",
    "old_style_rate": "Rate of Old-Style Agricultural Houses",
    "mean_floor_height": "Floor Height",
    "mean_quality": "Quality of Agricultural Housing",
    "tiled_wall_rate": "Rate of Tiled Exterior Walls",
    "exposed_wall_rate": "Rate of Exposed Exterior Walls",
    "air_conditioning_rate": "Air Conditioning Rate",
    "car_rate": "Car Rate",
    "motorcycle_rate": "Motorcycle Rate",
    "mean_nightlight": "Nightlight Brightness",
}


class Side(str, Enum):
    FIRST = "first_side"
    SECOND = "second_side"
    ON_LINE = "on_line"


@dataclass(frozen=True)
class DividingLine:
    name: str
    polyline: tuple[tuple[float, float], ...]
    first_label: str = "first_side"
    second_label: str = "second_side"

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise ValueError(f"line {self.name!r} needs at least 2 vertices")
        for a, b in zip(self.polyline[:-1], self.polyline[1:]):
            if a == b:
                raise ValueError(f"line {self.name!r} has repeated consecutive vertices")

    def label(self, side: Side) -> str:
        return {Side.FIRST: self.first_label, Side.SECOND: self.second_label}.get(side, "on_line")


def side_of_line(line: DividingLine, point: tuple[float, float]) -> Side:
    """Side of ``point`` relative to the nearest segment of ``line``.

    The first side is to the right of the direction of travel (negative
    cross product).  Equidistant segments resolve to the lower index.
    """
    px, py = point
    best_d, best_cross = math.inf, 0.0
    for (ax, ay), (bx, by) in zip(line.polyline[:-1], line.polyline[1:]):
        dx, dy = bx - ax, by - ay
        t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
        t = min(1.0, max(0.0, t))
        d = math.hypot(px - (ax + t * dx), py - (ay + t * dy))
        if d < best_d:
            best_d = d
            best_cross = dx * (py - ay) - dy * (px - ax)
    if abs(best_cross) < 1e-12:
        return Side.ON_LINE
    return Side.FIRST if best_cross < 0 else Side.SECOND


def load_lines(path: str | Path, sides: Mapping[str, Sequence[str]] | None = None) -> LoadResult[DividingLine]:
    """Dividing lines from a GeoJSON FeatureCollection of LineStrings.

    Side labels come from ``sides[name]`` or else the ``first_side`` /
    ``second_side`` feature properties.
    """
    result: LoadResult[DividingLine] = LoadResult()
    try:
        doc = json.loads(_decode(Path(path).read_bytes()))
    except ValueError as exc:
        result.header_error = f"invalid JSON: {exc}"
        return result
    if not isinstance(doc, dict) or not isinstance(doc.get("features"), list):
        result.header_error = "not a GeoJSON FeatureCollection"
        return result
    sides = sides or {}
    for i, feat in enumerate(doc["features"]):
        result.n_rows += 1
        try:
            props = feat.get("properties") or {}
            name = props.get("name")
            if not isinstance(name, str) or not name:
                raise GeometryError("missing property name")
            geom = feat.get("geometry") or {}
            if geom.get("type") != "LineString":
                raise GeometryError("line geometry must be a LineString")
            pts = tuple((float(p[0]), float(p[1])) for p in geom["coordinates"])
            labels = sides.get(name) or (
                props.get("first_side", "first_side"), props.get("second_side", "second_side")
            )
            result.records.append(DividingLine(name, pts, str(labels[0]), str(labels[1])))
        except (GeometryError, ValueError, TypeError, KeyError, IndexError, AttributeError) as exc:
            result.rejections.append(Rejection(i, str(exc)))
    return result


# ---------------------------------------------------------------------------
# Prediction


@dataclass(frozen=True)
class AtlasRecord:
    township_id: str
    county_id: str | None
    centroid: tuple[float, float] | None
    predicted_index: float
    label_index: float | None
    features: TownshipFeatures

    @property
    def is_labeled(self) -> bool:
        return self.label_index is not None

    def index(self, variant: str = "predicted") -> float:
        if variant == "blended" and self.label_index is not None:
            return self.label_index
        return self.predicted_index


@dataclass
class WealthAtlas:
    records: list[AtlasRecord]
    feature_order: tuple[str, ...]
    excluded: list[str] = field(default_factory=list)

    def indexes(self, variant: str = "predicted") -> np.ndarray:
        return np.array([r.index(variant) for r in self.records], dtype=np.float64)


def predict_national(
    model: ForestModel,
    features: Sequence[TownshipFeatures],
    boundaries: Sequence[TownshipBoundary] = (),
    labels: Sequence[TownshipLabels] = (),
) -> WealthAtlas:
    """Predict every township with at least one present feature.

    ``blended`` analytics substitute the survey label where one exists;
    ``predicted`` ones use the model output everywhere.
    """
    order = model.feature_order
    geo = {b.township_id: b for b in boundaries}
    lab = {l.township_id: l.composite_index for l in labels}
    kept = [f for f in sorted(features, key=lambda f: f.township_id) if f.n_present(order)]
    excluded = sorted(f.township_id for f in features if not f.n_present(order))
    pred = model.predict_matrix(feature_matrix(kept, order)) if kept else np.zeros(0)
    records = []
    for f, p in zip(kept, pred.tolist()):
        b = geo.get(f.township_id)
        records.append(
            AtlasRecord(
                f.township_id,
                b.county_id if b else None,
                b.centroid if b else None,
                p,
                lab.get(f.township_id),
                f,
            )
        )
    return WealthAtlas(records, tuple(order), excluded)


# ---------------------------------------------------------------------------
# Group summaries


def _group_means(records: Sequence[AtlasRecord], order: Sequence[str], variant: str) -> dict:
    out: dict = {"n": len(records)}
    out[INDEX] = float(np.mean([r.index(variant) for r in records])) if records else None
    for name in order:
        vals = [getattr(r.features, name) for r in records]
        vals = [v for v in vals if v is not None]
        out[name] = math.fsum(vals) / len(vals) if vals else None
    return out


def split_summary(atlas: WealthAtlas, line: DividingLine, variant: str = "predicted") -> dict:
    """Per-side means of the index and every feature (by township centroid)."""
    groups: dict[Side, list[AtlasRecord]] = {s: [] for s in Side}
    unlocated = 0
    for r in atlas.records:
        if r.centroid is None:
            unlocated += 1
            continue
        groups[side_of_line(line, r.centroid)].append(r)
    return {
        "line": line.name,
        "sides": {
            line.label(s): {"side": s.value, **_group_means(groups[s], atlas.feature_order, variant)}
            for s in Side
        },
        "unlocated": unlocated,
    }


def county_deciles(atlas: WealthAtlas, variant: str = "predicted") -> dict:
    """House-count-weighted county indexes and their top/bottom deciles.

    A county whose townships have no houses falls back to the unweighted
    mean and is flagged.
    """
    members: dict[str, list[AtlasRecord]] = {}
    for r in atlas.records:
        if r.county_id is not None:
            members.setdefault(r.county_id, []).append(r)
    counties = []
    for cid in sorted(members):
        rs = members[cid]
        w = np.array([r.features.house_count or 0 for r in rs], dtype=np.float64)
        v = np.array([r.index(variant) for r in rs])
        if w.sum() > 0:
            idx, flagged = float(w @ v / w.sum()), False
        else:
            idx, flagged = float(v.mean()), True
        counties.append({"county_id": cid, "index": idx, "weight": float(w.sum()), "n_townships": len(rs), "unweighted_fallback": flagged})
    d = math.ceil(len(counties) / 10)
    top = sorted(counties, key=lambda c: (-c["index"], c["county_id"]))[:d]
    bottom = sorted(counties, key=lambda c: (c["index"], c["county_id"]))[:d]
    return {
        "decile_size": d,
        "top": [c["county_id"] for c in top],
        "bottom": [c["county_id"] for c in bottom],
        "counties": counties,
    }


def zone_summary(atlas: WealthAtlas, zones: Mapping[str, str], variant: str = "predicted") -> dict:
    groups: dict[str, list[AtlasRecord]] = {}
    unzoned = []
    for r in atlas.records:
        z = zones.get(r.township_id)
        if z is None:
            unzoned.append(r)
        else:
            groups.setdefault(z, []).append(r)
    return {
        "zones": {z: _group_means(groups[z], atlas.feature_order, variant) for z in sorted(groups)},
        "unzoned": _group_means(unzoned, atlas.feature_order, variant),
    }


# ---------------------------------------------------------------------------
# Distribution shape


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def gaussian_kde_grid(x: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    dens = np.zeros(grid.shape)
    for chunk in np.array_split(x, max(1, x.size // 4096)):
        u = (grid[:, None] - chunk[None, :]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    return dens / (x.size * h * math.sqrt(2.0 * math.pi))


@dataclass
class Modality:
    mode_count: int
    mode_locations: list[float]
    bandwidth_used: float
    histogram: dict
    raw_mode_count: int = 0
    grid: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    density: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_json(self) -> dict:
        return {
            "mode_count": self.mode_count,
            "raw_mode_count": self.raw_mode_count,
            "mode_locations": self.mode_locations,
            "bandwidth_used": self.bandwidth_used,
            "histogram": self.histogram,
        }


def significant_modes(density: np.ndarray, min_height: float = 0.05, min_dip: float = 0.05) -> list[int]:
    """Grid indexes of the KDE maxima that count as modes.

    A strict interior local maximum counts when its density is at least
    ``min_height`` times the global maximum.  Two neighbouring maxima whose
    separating minimum lies within ``min_dip`` (relative) of the lower peak
    are one mode, located at the higher peak.
    """
    d = density
    inner = np.flatnonzero((d[1:-1] > d[:-2]) & (d[1:-1] > d[2:])) + 1
    kept = [int(i) for i in inner if d[i] >= min_height * d.max()]
    modes: list[int] = []
    for i in kept:
        if modes:
            a = modes[-1]
            if d[a : i + 1].min() >= (1.0 - min_dip) * min(d[a], d[i]):
                if d[i] > d[a]:
                    modes[-1] = i
                continue
        modes.append(i)
    return modes


def modality(
    values: Sequence[float],
    bandwidth: float | None = None,
    grid_size: int = 512,
    bins: int = 50,
    min_height: float = 0.05,
    min_dip: float = 0.05,
) -> Modality:
    """Count the significant modes of a Gaussian KDE on a regular grid.

    The grid spans three bandwidths beyond the data on each side; the default
    bandwidth is Silverman's rule.  Silverman's rule undersmooths enough that
    far-tail blips and shallow wiggles appear as local maxima, so only the
    maxima passing :func:`significant_modes` are counted.  The unfiltered
    count is kept as ``raw_mode_count``.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 10:
        raise ValueError("modality needs at least 10 values")
    counts, edges = np.histogram(x, bins=bins)
    hist = {"counts": counts.tolist(), "edges": edges.tolist()}
    if float(np.std(x)) == 0.0:
        return Modality(1, [float(x[0])], 0.0, hist, 1)
    h = float(bandwidth) if bandwidth is not None else silverman_bandwidth(x)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_size)
    dens = gaussian_kde_grid(x, grid, h)
    raw = int(((dens[1:-1] > dens[:-2]) & (dens[1:-1] > dens[2:])).sum())
    modes = significant_modes(dens, min_height, min_dip)
    return Modality(len(modes), grid[modes].tolist(), h, hist, raw, grid, dens)


def descriptive_table(
    features: Sequence[TownshipFeatures],
    indexes: Sequence[float],
    order: Sequence[str] = FEATURE_NAMES,
) -> list[dict]:
    """Mean, max, min and sample variance per indicator over present values."""
    if not features:
        raise ValueError("descriptive table needs at least one township")
    columns = {INDEX: [float(v) for v in indexes]}
    for name in order:
        columns[name] = [float(v) for f in features if (v := getattr(f, name)) is not None]
    rows = []
    for name, vals in columns.items():
        a = np.array(vals, dtype=np.float64)
        rows.append(
            {
                "indicator": name,
                "label": TABLE_LABELS.get(name, name),
                "n": int(a.size),
                "mean": float(a.mean()) if a.size else None,
                "max": float(a.max()) if a.size else None,
                "min": float(a.min()) if a.size else None,
                "variance": float(a.var(ddof=1)) if a.size > 1 else None,
            }
        )
    return rows


def analyze(
    atlas: WealthAtlas,
    lines: Sequence[DividingLine] = (),
    zones: Mapping[str, str] | None = None,
    bandwidth: float | None = None,
) -> dict:
    """Every regional analytic, for both the predicted and blended variants."""
    out: dict = {"n_townships": len(atlas.records), "n_labeled": sum(r.is_labeled for r in atlas.records), "excluded": atlas.excluded}
    for variant in VARIANTS:
        idx = atlas.indexes(variant)
        block: dict = {}
        if idx.size:
            block["summary"] = {
                "mean": float(idx.mean()),
                "variance": float(idx.var(ddof=1)) if idx.size > 1 else None,
            }
            block["descriptive"] = descriptive_table([r.features for r in atlas.records], idx, atlas.feature_order)
        if idx.size >= 10:
            block["modality"] = modality(idx, bandwidth).to_json()
        block["line_splits"] = {ln.name: split_summary(atlas, ln, variant) for ln in lines}
        block["county_deciles"] = county_deciles(atlas, variant)
        if zones is not None:
            block["zones"] = zone_summary(atlas, zones, variant)
        out[variant] = block
    return out


# ---------------------------------------------------------------------------
# Export


def sig9(v: float) -> float:
    return float(f"{v:.9g}")


def _round(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        return sig9(obj) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item())
    raise TypeError(f"cannot export {type(obj).__name__}")


def dump_json(path: str | Path, doc: dict, indent: int | None = 1) -> None:
    text = json.dumps(_round(doc), sort_keys=True, indent=indent, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def atlas_columns(order: Sequence[str]) -> list[str]:
    return ["township_id", "county_id", "centroid_lon", "centroid_lat", "is_labeled", "label_index", "predicted_index", *order]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def export(
    atlas: WealthAtlas,
    boundaries: Sequence[TownshipBoundary],
    out_dir: str | Path,
    report: dict | None = None,
) -> list[Path]:
    """Write atlas.geojson, atlas.csv and report.json; returns the paths."""
    out = Path(out_dir)
    if not out.is_dir():
        raise OSError(f"output directory {out} does not exist")
    geo = {b.township_id: b for b in boundaries}
    order = atlas.feature_order

    feats = []
    for r in atlas.records:
        b = geo.get(r.township_id)
        if b is None:
            continue
        props = {
            "township_id": r.township_id,
            "county_id": r.county_id,
            "predicted_index": r.predicted_index,
            "label_index": r.label_index,
            "is_labeled": r.is_labeled,
        }
        props.update({name: getattr(r.features, name) for name in order})
        feats.append({"type": "Feature", "properties": props, "geometry": boundary_geometry(b)})
    geo_path = out / "atlas.geojson"
    dump_json(geo_path, {"type": "FeatureCollection", "features": feats}, indent=None)

    csv_path = out / "atlas.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(atlas_columns(order))
        for r in atlas.records:
            lon, lat = r.centroid if r.centroid else (None, None)
            w.writerow(
                [_cell(v) for v in (r.township_id, r.county_id, lon, lat, r.is_labeled, r.label_index, r.predicted_index)]
                + [_cell(getattr(r.features, name)) for name in order]
            )

    rep_path = out / "report.json"
    dump_json(rep_path, report or {})
    return [geo_path, csv_path, rep_path]


def read_atlas_csv(path: str | Path) -> list[dict]:
    """Parse atlas.csv back into typed rows (floats, ints, ``None``)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in ("township_id", "county_id"):
                    row[k] = v or None
                elif v == "":
                    row[k] = None
                elif k in ("is_labeled", "house_count"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows
