import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import gaussian_kde

from conftest import square
from oracles import column_stats
from wealth_atlas import atlas
from wealth_atlas.features import FEATURE_NAMES, TownshipFeatures
from wealth_atlas.forest import ForestConfig, fit_forest

VERTICAL = atlas.DividingLine("v", ((0.0, -10.0), (0.0, 10.0)), "east", "west")


def record(tid, county, centroid, index, houses=10, label=None):
    feats = TownshipFeatures(tid, house_count=houses, car_rate=0.5)
    return atlas.AtlasRecord(tid, county, centroid, index, label, feats)


def make_atlas(records):
    return atlas.WealthAtlas(records, FEATURE_NAMES)


# ---------------------------------------------------------------------------
# lines


def test_side_of_line_right_is_first():
    assert atlas.side_of_line(VERTICAL, (1.0, 0.0)) is atlas.Side.FIRST
    assert atlas.side_of_line(VERTICAL, (-1.0, 0.0)) is atlas.Side.SECOND
    assert atlas.side_of_line(VERTICAL, (0.0, 3.0)) is atlas.Side.ON_LINE


def test_polyline_uses_nearest_segment():
    line = atlas.DividingLine("bend", ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0)))
    assert atlas.side_of_line(line, (0.5, -0.1)) is atlas.Side.FIRST
    assert atlas.side_of_line(line, (1.2, 0.5)) is atlas.Side.FIRST
    assert atlas.side_of_line(line, (0.8, 0.5)) is atlas.Side.SECOND


def test_line_validation():
    with pytest.raises(ValueError):
        atlas.DividingLine("x", ((0.0, 0.0),))
    with pytest.raises(ValueError):
        atlas.DividingLine("x", ((0.0, 0.0), (0.0, 0.0), (1.0, 1.0)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=30))
def test_every_township_in_one_bucket(points):
    recs = [record(f"t{i}", "c", p, 0.0) for i, p in enumerate(points)]
    summary = atlas.split_summary(make_atlas(recs), VERTICAL)
    assert sum(s["n"] for s in summary["sides"].values()) == len(points)


def test_split_summary_means():
    recs = [record("a", "c", (1.0, 0.0), 2.0), record("b", "c", (2.0, 0.0), 4.0), record("c", "c", (-1.0, 0.0), -1.0), record("d", "c", None, 9.0)]
    s = atlas.split_summary(make_atlas(recs), VERTICAL)
    assert s["sides"]["east"]["composite_index"] == 3.0
    assert s["sides"]["west"]["composite_index"] == -1.0
    assert s["sides"]["on_line"]["n"] == 0 and s["sides"]["on_line"]["composite_index"] is None
    assert s["unlocated"] == 1


def test_load_lines(tmp_path):
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"name": "hu"}, "geometry": {"type": "LineString", "coordinates": [[0, 0], [0, 1]]}},
        {"type": "Feature", "properties": {}, "geometry": {"type": "LineString", "coordinates": [[0, 0], [0, 1]]}},
    ]}
    (tmp_path / "l.geojson").write_text(json.dumps(doc))
    res = atlas.load_lines(tmp_path / "l.geojson", {"hu": ["east", "west"]})
    assert [ln.first_label for ln in res.records] == ["east"]
    assert res.rejections[0].reason == "missing property name"


# ---------------------------------------------------------------------------
# counties and zones


def test_county_weighting_and_deciles():
    recs = []
    for c in range(20):
        recs.append(record(f"t{c}a", f"C{c:02d}", (0.0, 0.0), float(c), houses=3))
        recs.append(record(f"t{c}b", f"C{c:02d}", (0.0, 0.0), float(c) + 1.0, houses=1))
    recs.append(record("z", "C99", (0.0, 0.0), 100.0, houses=0))
    d = atlas.county_deciles(make_atlas(recs))
    c0 = d["counties"][0]
    assert c0["index"] == pytest.approx(0.25) and not c0["unweighted_fallback"]
    assert d["counties"][-1]["unweighted_fallback"]
    assert d["decile_size"] == 3
    assert d["top"] == ["C99", "C19", "C18"] and d["bottom"] == ["C00", "C01", "C02"]


def test_deciles_invariant_under_monotone_transform():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=30)
    base = make_atlas([record(f"t{i}", f"C{i:02d}", (0, 0), float(v)) for i, v in enumerate(vals)])
    warped = make_atlas([record(f"t{i}", f"C{i:02d}", (0, 0), float(np.exp(3 * v) + 2)) for i, v in enumerate(vals)])
    a, b = atlas.county_deciles(base), atlas.county_deciles(warped)
    assert (a["top"], a["bottom"]) == (b["top"], b["bottom"])


def test_zone_summary_with_unzoned():
    recs = [record("a", "c", (0, 0), 1.0), record("b", "c", (0, 0), 3.0), record("c", "c", (0, 0), 5.0)]
    z = atlas.zone_summary(make_atlas(recs), {"a": "Z1", "b": "Z1"})
    assert z["zones"]["Z1"]["composite_index"] == 2.0
    assert z["unzoned"]["n"] == 1


# ---------------------------------------------------------------------------
# modality and descriptive statistics


def test_kde_matches_scipy():
    x = np.random.default_rng(1).normal(size=300)
    h = atlas.silverman_bandwidth(x)
    grid = np.linspace(-4, 4, 101)
    ref = gaussian_kde(x, bw_method=h / x.std(ddof=1))(grid)
    assert np.allclose(atlas.gaussian_kde_grid(x, grid, h), ref, rtol=1e-10, atol=1e-14)


def test_silverman_iqr_zero_falls_back_to_sd():
    x = np.array([0.0] * 20 + [1.0, 2.0])
    assert atlas.silverman_bandwidth(x) == pytest.approx(0.9 * x.std(ddof=1) * 22 ** -0.2)


def test_unimodal_normal_sample():
    assert atlas.modality(np.random.default_rng(2).normal(size=1000)).mode_count == 1


def test_mixture_separation_controls_modes():
    rng = np.random.default_rng(3)
    z = rng.normal(size=1000)
    sign = np.where(rng.random(1000) < 0.5, -1.0, 1.0)
    assert atlas.modality(z + 3.0 * sign).mode_count == 2
    assert atlas.modality(z + 0.3 * sign).mode_count == 1


def test_modality_constant_and_small():
    assert atlas.modality([2.0] * 20).mode_count == 1
    with pytest.raises(ValueError):
        atlas.modality([1.0, 2.0])


def test_descriptive_table_against_oracle():
    rng = np.random.default_rng(4)
    feats = [TownshipFeatures(f"t{i}", house_count=int(rng.integers(0, 50)), car_rate=None if i % 3 == 0 else float(rng.random())) for i in range(40)]
    idx = rng.normal(size=40)
    table = {r["indicator"]: r for r in atlas.descriptive_table(feats, idx)}
    for name, vals in (("composite_index", idx.tolist()), ("car_rate", [f.car_rate for f in feats])):
        want = column_stats(vals)
        for k in ("mean", "max", "min", "variance"):
            assert table[name][k] == pytest.approx(want[k], rel=1e-12)
    assert table["mean_quality"]["n"] == 0 and table["mean_quality"]["mean"] is None


def test_descriptive_binary_column_sample_variance():
    feats = [TownshipFeatures("a", car_rate=0.0), TownshipFeatures("b", car_rate=1.0)]
    row = next(r for r in atlas.descriptive_table(feats, [0.0, 0.0]) if r["indicator"] == "car_rate")
    assert (row["mean"], row["variance"]) == (0.5, 0.5)


# ---------------------------------------------------------------------------
# prediction and export


def small_model():
    rng = np.random.default_rng(5)
    X = rng.random((40, 10))
    return fit_forest(X, X[:, 8] * 2.0, ForestConfig(n_tree=5, n_feature=3), FEATURE_NAMES)


def test_predict_national_excludes_featureless():
    model = small_model()
    feats = [TownshipFeatures("a", car_rate=0.5), TownshipFeatures("b")]
    res = atlas.predict_national(model, feats, [square("a", 0, 0)])
    assert [r.township_id for r in res.records] == ["a"] and res.excluded == ["b"]
    assert res.records[0].centroid == (0.5, 0.5)


def test_export_round_trip_and_determinism(tmp_path):
    model = small_model()
    rng = np.random.default_rng(6)
    feats = [TownshipFeatures(f"t{i}", house_count=i, car_rate=float(rng.random()), mean_quality=float(rng.random()) * 10) for i in range(12)]
    bounds = [square(f"t{i}", i, 0) for i in range(12)]
    res = atlas.predict_national(model, feats, bounds)
    report = atlas.analyze(res, [VERTICAL], {"t0": "Z1"})
    paths = atlas.export(res, bounds, tmp_path, report)
    first = [p.read_bytes() for p in paths]
    atlas.export(res, bounds, tmp_path, report)
    assert [p.read_bytes() for p in paths] == first

    rows = atlas.read_atlas_csv(tmp_path / "atlas.csv")
    for r, rec in zip(rows, res.records):
        assert r["predicted_index"] == atlas.sig9(rec.predicted_index)
        assert r["car_rate"] == atlas.sig9(rec.features.car_rate)
        assert r["mean_base_area_m2"] is None
        assert r["house_count"] == rec.features.house_count
    geo = json.loads((tmp_path / "atlas.geojson").read_text())
    assert len(geo["features"]) == 12
    assert geo["features"][0]["properties"]["predicted_index"] == atlas.sig9(res.records[0].predicted_index)


def test_export_empty_atlas(tmp_path):
    empty = atlas.WealthAtlas([], FEATURE_NAMES)
    atlas.export(empty, [], tmp_path, atlas.analyze(empty))
    assert json.loads((tmp_path / "atlas.geojson").read_text()) == {"features": [], "type": "FeatureCollection"}


def test_export_missing_dir(tmp_path):
    with pytest.raises(OSError):
        atlas.export(atlas.WealthAtlas([], FEATURE_NAMES), [], tmp_path / "nope")


def test_blended_variant_uses_labels():
    recs = [record("a", "c", (1, 0), 1.0, label=5.0), record("b", "c", (1, 0), 2.0)]
    a = make_atlas(recs)
    assert a.indexes("blended").tolist() == [5.0, 2.0]
    assert a.indexes("predicted").tolist() == [1.0, 2.0]


def test_significant_modes_rules():
    d = np.array([0.0, 1.0, 0.2, 0.98, 0.01, 0.03, 0.0])
    assert atlas.significant_modes(d) == [1, 3]  # tail blip 0.03 < 5% of peak
    shallow = np.array([0.0, 1.0, 0.97, 0.99, 0.0])
    assert atlas.significant_modes(shallow) == [1]  # 2% dip merges into the higher peak
    assert atlas.significant_modes(shallow, min_dip=0.0) == [1, 3]
