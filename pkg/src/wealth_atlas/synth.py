"""Synthetic national fixtures driven by a known latent wealth factor.

Townships are square grid cells.  Each gets a latent factor ``w`` from the
chosen spatial pattern; every observable is a monotone function of ``w``
perturbed by noise proportional to ``noise_scale``:

* booleans are ``u < sigmoid(a * w_item + c)`` where ``u`` is a stratified
  dither, ``(rank + 0.5) / n`` over the items of a township in random order;
* ordinals and counts are ``floor(level + slope * w_item + u)``;
* continuous values are linear (or log-linear) in ``w_item`` plus noise.

``w_item`` is ``w`` plus a per-township, per-observable offset and a per-item
deviation, both scaled by ``noise_scale``.  With ``noise_scale=0`` and a fixed
item count every township rate is therefore a non-decreasing function of
``w``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as wio

PATTERNS = ("gradient", "two_cluster", "uniform")


@dataclass(frozen=True)
class SynthConfig:
    n_townships: int = 400
    households_per_township: tuple[int, int] = (30, 80)
    views_per_township: tuple[int, int] = (10, 40)
    images_per_township: tuple[int, int] = (10, 40)
    footprints_per_township: tuple[int, int] = (20, 80)
    latent_spatial_pattern: str = "two_cluster"
    noise_scale: float = 0.5
    seed: int = 0
    labeled_fraction: float = 0.5
    missing_rate: float = 0.05
    cell_deg: float = 0.1
    origin: tuple[float, float] = (100.0, 25.0)
    county_block: int = 3

    def validate(self) -> None:
        if self.n_townships < 1:
            raise ValueError("n_townships must be >= 1")
        for name in ("households_per_township", "views_per_township", "images_per_township", "footprints_per_township"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be a nonempty range lo <= hi")
        if self.latent_spatial_pattern not in PATTERNS:
            raise ValueError(f"latent_spatial_pattern must be one of {PATTERNS}")
        if not (math.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise ValueError("noise_scale must be finite and >= 0")
        if not 0 <= self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in [0, 1]")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must be in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        doc = dict(doc)
        for k in ("households_per_township", "views_per_township", "images_per_township", "footprints_per_township", "origin"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class SynthFixture:
    out_dir: Path
    paths: dict[str, Path]
    truth: dict[str, float]
    labeled: list[str]
    grid_shape: tuple[int, int] = (0, 0)
    extra: dict = field(default_factory=dict)


# (slope, offset) of each household boolean's logistic link
HOUSEHOLD_BOOLEANS = {
    "wall_decorated": (1.0, 0.0),
    "flush_toilet": (1.4, 0.2),
    "independent_kitchen": (1.0, 1.0),
    "bathroom": (1.3, 0.0),
    "tap_water": (0.5, 1.5),
    "cooling_facility": (1.3, -0.3),
    "broadband": (0.9, 0.5),
    "owns_car": (1.0, 0.5),
}


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _counts(rng: np.random.Generator, n: int, lo_hi: tuple[int, int]) -> np.ndarray:
    lo, hi = lo_hi
    return rng.integers(lo, hi + 1, size=n)


def _dither(rng: np.random.Generator, owner: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Stratified uniforms: within each township, a random order of (k + 0.5) / n."""
    if owner.size == 0:
        return np.zeros(0)
    keys = rng.random(owner.size)
    order = np.lexsort((keys, owner))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty(owner.size, dtype=np.int64)
    rank[order] = np.arange(owner.size) - np.repeat(starts, counts)
    return (rank + 0.5) / counts[owner]


def _latent(cfg: SynthConfig, rng: np.random.Generator, xn: np.ndarray, yn: np.ndarray) -> np.ndarray:
    n = xn.size
    if cfg.latent_spatial_pattern == "gradient":
        return 3.0 * (xn - 0.5) + rng.normal(0.0, 0.1, n)
    if cfg.latent_spatial_pattern == "two_cluster":
        high = xn + 0.25 * np.sin(2.0 * np.pi * yn) > 0.5
        return np.where(high, 1.5, -1.5) + rng.normal(0.0, 0.35, n)
    return rng.normal(0.0, 1.0, n)


def generate(config: SynthConfig, out_dir: str | Path) -> SynthFixture:
    """Write a full input file set plus ``truth.csv`` and a run ``config.json``."""
    cfg = config
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    noise = cfg.noise_scale
    n = cfg.n_townships

    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    col = np.arange(n) % cols
    row = np.arange(n) // cols
    xn = (col + 0.5) / cols
    yn = (row + 0.5) / rows
    tids = [f"T{k:05d}" for k in range(n)]
    w = _latent(cfg, rng, xn, yn)

    n_lab = int(round(cfg.labeled_fraction * n))
    labeled_idx = np.sort(rng.permutation(n)[:n_lab])

    # per-township, per-observable offsets
    def offset() -> np.ndarray:
        return noise * 0.4 * rng.normal(size=n)

    paths: dict[str, Path] = {}

    # --- boundaries, zones, truth
    x0, y0 = cfg.origin
    d = cfg.cell_deg
    boundaries = []
    zones = []
    for k in range(n):
        ax, ay = x0 + col[k] * d, y0 + row[k] * d
        ring = ((ax, ay), (ax + d, ay), (ax + d, ay + d), (ax, ay + d), (ax, ay))
        cid = f"C{row[k] // cfg.county_block:03d}-{col[k] // cfg.county_block:03d}"
        boundaries.append(wio.TownshipBoundary(tids[k], cid, (ring,), wio.boundary_centroid([ring])))
        zx = min(2, 3 * col[k] // cols)
        zy = min(2, 3 * row[k] // rows)
        zones.append((tids[k], f"Z{3 * zy + zx + 1}"))
    paths["townships"] = out / "townships.geojson"
    wio.write_boundaries(paths["townships"], boundaries)
    paths["zones"] = out / "zones.csv"
    wio.write_zones(paths["zones"], zones)
    paths["truth"] = out / "truth.csv"
    wio.write_table(paths["truth"], ("township_id", "latent_w"), ((tids[k], float(w[k])) for k in range(n)))

    # --- households (labeled townships only)
    hcount = np.zeros(n, dtype=np.int64)
    hcount[labeled_idx] = _counts(rng, n_lab, cfg.households_per_township)
    owner = np.repeat(np.arange(n), hcount)
    wh = w[owner] + noise * 0.5 * rng.normal(size=owner.size)
    cols_h: dict[str, np.ndarray] = {}
    cols_h["income_bracket"] = np.clip(np.floor(2.5 + 0.9 * wh + _dither(rng, owner, hcount)), 1, 5).astype(int)
    cols_h["floors"] = np.clip(np.floor(1.6 + 0.45 * wh + _dither(rng, owner, hcount)), 1, 7).astype(int)
    cols_h["base_area_m2"] = np.maximum(20.0, 110.0 + 15.0 * wh + noise * 15.0 * rng.normal(size=owner.size))
    cols_h["structure_class"] = np.clip(np.floor(2.5 + 0.7 * wh + _dither(rng, owner, hcount)), 1, 4).astype(int)
    for name, (a, c) in HOUSEHOLD_BOOLEANS.items():
        cols_h[name] = _dither(rng, owner, hcount) < _sigmoid(a * wh + c)
    cols_h["electricity_bill_yuan"] = np.maximum(
        0.0, 90.0 * np.exp(0.35 * wh) + noise * 20.0 * rng.normal(size=owner.size)
    )
    hh_cols = list(wio.HOUSEHOLD_SCHEMA)[2:]
    paths["households"] = out / "households.csv"
    wio.write_table(
        paths["households"],
        list(wio.HOUSEHOLD_SCHEMA),
        (
            [f"H{i:07d}", tids[owner[i]], *(cols_h[c][i].item() for c in hh_cols)]
            for i in range(owner.size)
        ),
    )

    # --- house views
    vcount = _counts(rng, n, cfg.views_per_township)
    owner = np.repeat(np.arange(n), vcount)
    m = owner.size

    def item_latent() -> np.ndarray:
        return w[owner] + offset()[owner] + noise * 0.6 * rng.normal(size=m)

    floors = np.clip(np.floor(1.6 + 0.45 * item_latent() + _dither(rng, owner, vcount)), 1, 7).astype(int)
    quality = np.clip(5.8 + 0.5 * item_latent() + noise * 0.5 * rng.normal(size=m), 0.0, 10.0)
    wl = item_latent()
    p_tiled = _sigmoid(0.9 * wl - 0.7)
    p_exposed = (1.0 - p_tiled) * _sigmoid(-1.0 * wl - 1.5)
    u = _dither(rng, owner, vcount)
    wall = np.where(u < p_tiled, 0, np.where(u < p_tiled + p_exposed, 1, 2))
    ac = _dither(rng, owner, vcount) < _sigmoid(1.2 * item_latent() - 1.2)
    miss = rng.random((3, m)) < cfg.missing_rate
    paths["house_views"] = out / "house_views.csv"
    wio.write_table(
        paths["house_views"],
        list(wio.HOUSE_VIEW_SCHEMA),
        (
            [
                f"V{i:07d}",
                tids[owner[i]],
                None if miss[0, i] else int(floors[i]),
                None if miss[1, i] else float(quality[i]),
                None if miss[2, i] else wio.WALL_TYPES[wall[i]],
                bool(ac[i]),
            ]
            for i in range(m)
        ),
    )

    # --- images
    icount = _counts(rng, n, cfg.images_per_township)
    owner = np.repeat(np.arange(n), icount)
    m = owner.size
    car = _dither(rng, owner, icount) < _sigmoid(0.9 * item_latent() - 1.8)
    moto = _dither(rng, owner, icount) < _sigmoid(0.4 * item_latent() - 2.0)
    paths["images"] = out / "images.csv"
    wio.write_table(
        paths["images"],
        list(wio.IMAGE_SCHEMA),
        ([f"I{i:07d}", tids[owner[i]], bool(car[i]), bool(moto[i])] for i in range(m)),
    )

    # --- footprints, strictly inside their cell
    fcount = _counts(rng, n, cfg.footprints_per_township)
    owner = np.repeat(np.arange(n), fcount)
    m = owner.size
    margin = 0.01 * d
    lon = x0 + col[owner] * d + margin + rng.random(m) * (d - 2 * margin)
    lat = y0 + row[owner] * d + margin + rng.random(m) * (d - 2 * margin)
    area = np.maximum(10.0, 107.0 + 18.0 * item_latent() + noise * 20.0 * rng.normal(size=m))
    old = _dither(rng, owner, fcount) < _sigmoid(-1.0 * item_latent() - 1.0)
    paths["footprints"] = out / "footprints.csv"
    wio.write_table(
        paths["footprints"],
        list(wio.FOOTPRINT_SCHEMA),
        ([f"F{i:08d}", float(lon[i]), float(lat[i]), float(area[i]), bool(old[i])] for i in range(m)),
    )

    # --- nightlight
    light = np.maximum(0.0, 5.0 + 2.5 * w + noise * 1.0 * rng.normal(size=n))
    paths["nightlight"] = out / "nightlight.csv"
    wio.write_nightlight(paths["nightlight"], ((tids[k], float(light[k])) for k in range(n)))

    # --- sample dividing lines through the grid centre (synthetic stand-ins)
    xmid = x0 + cols * d / 2
    ymid = y0 + rows * d / 2
    lines = {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "properties": {"name": "east_west_divide", "first_side": "east", "second_side": "west"},
                "geometry": {"type": "LineString", "coordinates": [[xmid, y0 - d], [xmid, y0 + (rows + 1) * d]]},
            },
            {
                "type": "Feature",
                "properties": {"name": "north_south_divide", "first_side": "south", "second_side": "north"},
                "geometry": {"type": "LineString", "coordinates": [[x0 - d, ymid], [x0 + (cols + 1) * d, ymid]]},
            },
        ],
    }
    paths["lines"] = out / "lines.geojson"
    paths["lines"].write_text(json.dumps(lines, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    run_config = {
        "inputs": {k: p.name for k, p in paths.items() if k not in ("truth",)},
        "forest": {"n_tree": 100, "n_feature": 1, "min_leaf": 1, "master_seed": cfg.seed},
        "cv": {"k": 10, "seed": cfg.seed},
        "features": {"include_nightlight": False},
        "synth": cfg.to_dict(),
    }
    paths["config"] = out / "config.json"
    paths["config"].write_text(json.dumps(run_config, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    return SynthFixture(
        out, paths, {tids[k]: float(w[k]) for k in range(n)}, [tids[k] for k in labeled_idx], (cols, rows)
    )


def load_truth(path: str | Path) -> dict[str, float]:
    res = wio.load_table(
        path, {"township_id": wio.parse_id, "latent_w": wio.parse_real}, lambda v: (v["township_id"], v["latent_w"]), "township_id"
    )
    return dict(res.records)
