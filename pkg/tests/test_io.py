import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from wealth_atlas import io as wio

HH_HEADER = ",".join(wio.HOUSEHOLD_SCHEMA)
GOOD_HH = "h1,t1,3,2,120.5,2,1,1,0,1,1,0,1,0,88.0"


def write(tmp_path, name, text, mode="w"):
    p = tmp_path / name
    if mode == "wb":
        p.write_bytes(text)
    else:
        p.write_text(text, encoding="utf-8")
    return p


def test_household_row_parses(tmp_path):
    res = wio.load_households(write(tmp_path, "h.csv", f"{HH_HEADER}\n{GOOD_HH}\n"))
    assert res.ok and res.n_rows == 1
    r = res.records[0]
    assert (r.income_bracket, r.floors, r.base_area_m2, r.flush_toilet, r.independent_kitchen) == (3, 2, 120.5, True, False)


def test_ordinal_out_of_range_rejected_with_field(tmp_path):
    bad = GOOD_HH.replace("h1,t1,3", "h2,t1,7")
    res = wio.load_households(write(tmp_path, "h.csv", f"{HH_HEADER}\n{GOOD_HH}\n{bad}\n"))
    assert len(res.records) == 1
    (rej,) = res.rejections
    assert rej.field == "income_bracket" and rej.record_id == "h2" and "range" in rej.reason
    assert rej.line == 3


@pytest.mark.parametrize(
    "cell, column",
    [("yes", "flush_toilet"), ("2", "flush_toilet"), ("", "floors"), ("nan", "base_area_m2"), ("-1", "base_area_m2")],
)
def test_bad_cells_rejected(tmp_path, cell, column):
    cells = GOOD_HH.split(",")
    cells[list(wio.HOUSEHOLD_SCHEMA).index(column)] = cell
    res = wio.load_households(write(tmp_path, "h.csv", f"{HH_HEADER}\n{','.join(cells)}\n"))
    assert not res.records and res.rejections[0].field == column


def test_header_any_order_and_bom(tmp_path):
    cols = list(wio.IMAGE_SCHEMA)[::-1]
    text = "﻿" + ",".join(cols) + "\n0,1,t1,i1\n"
    res = wio.load_images(write(tmp_path, "i.csv", text))
    assert res.ok
    assert res.records[0] == wio.ImageRecord("i1", "t1", True, False)


def test_header_errors_reject_every_row(tmp_path):
    res = wio.load_images(write(tmp_path, "i.csv", "image_id,township_id,has_car\ni1,t1,1\ni2,t1,0\n"))
    assert res.header_error and "has_motorcycle" in res.header_error
    assert len(res.rejections) == 2 and not res.records
    res = wio.load_images(write(tmp_path, "j.csv", "image_id,township_id,has_car,has_motorcycle,extra\n"))
    assert "extra" in res.header_error


def test_duplicate_id_and_blank_lines(tmp_path):
    text = "image_id,township_id,has_car,has_motorcycle\ni1,t1,1,0\n\ni1,t2,0,0\n"
    res = wio.load_images(write(tmp_path, "i.csv", text))
    assert len(res.records) == 1 and res.rejections[0].reason == "duplicate id"
    assert res.n_rows == len(res.records) + len(res.rejections) == 2


def test_invalid_utf8_rejected_not_crashing(tmp_path):
    data = b"image_id,township_id,has_car,has_motorcycle\ni\xff1,t1,1,0\ni2,t1,1,0\n"
    res = wio.load_images(write(tmp_path, "i.csv", data, "wb"))
    assert len(res.records) == 1 and "UTF-8" in res.rejections[0].reason


def test_wrong_cell_count(tmp_path):
    res = wio.load_images(write(tmp_path, "i.csv", "image_id,township_id,has_car,has_motorcycle\ni1,t1,1\n"))
    assert "expected 4 cells" in res.rejections[0].reason


def test_house_view_optional_fields(tmp_path):
    text = ",".join(wio.HOUSE_VIEW_SCHEMA) + "\nv1,t1,,,,1\nv2,t1,2,11.0,tiled,0\nv3,t1,2,5.0,brick,0\n"
    res = wio.load_house_views(write(tmp_path, "v.csv", text))
    assert res.records == [wio.HouseViewRecord("v1", "t1", None, None, None, True)]
    assert [r.field for r in res.rejections] == ["quality_score", "wall_type"]


def test_footprint_coordinate_ranges(tmp_path):
    text = ",".join(wio.FOOTPRINT_SCHEMA) + "\nf1,181.0,30.0,50.0,0\nf2,100.0,-91.0,50.0,0\nf3,100.0,30.0,50.0,1\n"
    res = wio.load_footprints(write(tmp_path, "f.csv", text))
    assert [r.field for r in res.rejections] == ["centroid_lon", "centroid_lat"]
    assert res.records[0].is_old_style is True


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-180, 180, allow_nan=False),
            st.floats(-90, 90, allow_nan=False),
            st.floats(0, 1e6, allow_nan=False),
            st.booleans(),
        ),
        max_size=20,
    )
)
def test_footprint_round_trip_exact(tmp_path_factory, rows):
    recs = [wio.HouseFootprint(f"f{i}", *r) for i, r in enumerate(rows)]
    p = tmp_path_factory.mktemp("rt") / "f.csv"
    wio.write_footprints(p, recs)
    res = wio.load_footprints(p)
    assert res.ok and res.records == recs


# ---------------------------------------------------------------------------
# boundaries


def fc(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)})


def feature(tid, coords, kind="Polygon", county="c1"):
    return {"type": "Feature", "properties": {"township_id": tid, "county_id": county}, "geometry": {"type": kind, "coordinates": coords}}


CW_SQUARE = [[0, 0], [0, 1], [1, 1], [1, 0], [0, 0]]


def test_boundary_orientation_normalized(tmp_path):
    hole_ccw = [[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8], [0.2, 0.2]]
    res = wio.load_boundaries(write(tmp_path, "b.geojson", fc(feature("t1", [CW_SQUARE, hole_ccw]))))
    assert res.ok
    outer, hole = res.records[0].rings
    assert wio.signed_area(outer) > 0 > wio.signed_area(hole)
    assert res.records[0].centroid == pytest.approx((0.5, 0.5))


def test_boundary_rejections(tmp_path):
    degenerate = [[0, 0], [1, 1], [2, 2], [0, 0]]
    open_ring = [[0, 0], [1, 0], [1, 1], [0, 1]]
    text = fc(
        feature("t1", [degenerate]),
        feature("t2", [open_ring]),
        feature("t3", [[0, 0], [1, 0]], kind="LineString"),
        {"type": "Feature", "properties": {"county_id": "c"}, "geometry": {"type": "Polygon", "coordinates": [CW_SQUARE]}},
        feature("t4", [CW_SQUARE]),
        feature("t4", [CW_SQUARE]),
    )
    res = wio.load_boundaries(write(tmp_path, "b.geojson", text))
    reasons = [r.reason for r in res.rejections]
    assert reasons == ["degenerate ring", "ring not closed", "non-polygonal geometry 'LineString'", "missing property township_id", "duplicate id"]
    assert [b.township_id for b in res.records] == ["t4"]


def test_boundary_header_errors(tmp_path):
    assert wio.load_boundaries(write(tmp_path, "a.geojson", "{not json")).header_error.startswith("invalid JSON")
    assert "FeatureCollection" in wio.load_boundaries(write(tmp_path, "b.geojson", '{"type": "Feature"}')).header_error


def test_multipolygon_round_trip(tmp_path):
    sq2 = [[2, 0], [3, 0], [3, 1], [2, 1], [2, 0]]
    res = wio.load_boundaries(write(tmp_path, "b.geojson", fc(feature("t1", [[CW_SQUARE], [sq2]], kind="MultiPolygon"))))
    b = res.records[0]
    assert len(b.parts()) == 2 and b.centroid == pytest.approx((1.5, 0.5))
    out = tmp_path / "out.geojson"
    wio.write_boundaries(out, [b])
    again = wio.load_boundaries(out).records[0]
    assert again == b


def test_shoelace_area():
    ring = ((0.0, 0.0), (2.0, 0.0), (2.0, 3.0), (0.0, 3.0), (0.0, 0.0))
    assert wio.signed_area(ring) == 6.0
    assert wio.signed_area(ring[::-1]) == -6.0
    assert math.isclose(wio.ring_centroid(ring)[1], 1.0)
