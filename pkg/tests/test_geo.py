import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import MultiPoint, Point, Polygon

import oracles
from mobarrier.geo import (
    BarrierGeometry, BarrierLayer, GeometryError, PoiTable, ZoneMap, barrier_layers_to_geojson, convex_hull,
    count_crossings, crossing_counts, great_circle, haversine, hull_poi_count, hull_poi_counts,
    load_barrier_layers, local_projection, points_in_hull, points_in_polygon, polygon_centroid,
    segments_intersect,
)

lattice = st.tuples(st.integers(0, 10), st.integers(0, 10))


def square(x0, y0, s=1.0):
    return np.array([[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]], dtype=float)


def test_haversine_known_values():
    # one degree of latitude on the mean-radius sphere
    assert haversine(0.0, 0.0, 1.0, 0.0) == pytest.approx(6371.0088 * np.pi / 180, rel=1e-12)
    assert haversine(10.0, 20.0, 10.0, 20.0) == 0.0
    # antipodes
    assert haversine(0.0, 0.0, 0.0, 180.0) == pytest.approx(np.pi * 6371.0088, rel=1e-12)
    assert great_circle((42.0, -71.0), (42.0, -71.0)) == 0.0


@given(st.floats(-80, 80), st.floats(-179, 179), st.floats(-80, 80), st.floats(-179, 179))
def test_haversine_symmetric_nonnegative(la1, lo1, la2, lo2):
    d = haversine(la1, lo1, la2, lo2)
    assert d >= 0
    assert d == pytest.approx(haversine(la2, lo2, la1, lo1), abs=1e-9)


def test_local_projection_small_offsets_match_haversine():
    x, y = local_projection(42.31, -71.09, 42.3, -71.1)
    assert np.hypot(x, y) == pytest.approx(haversine(42.3, -71.1, 42.31, -71.09), rel=1e-3)


def test_polygon_centroid_matches_shapely():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ring = oracles.lattice_polygon(rng).astype(float)
        lat, lon = polygon_centroid([[ring]])
        c = Polygon(ring).centroid
        assert (lon, lat) == pytest.approx((c.x, c.y), abs=1e-12)


def test_polygon_centroid_with_hole():
    outer, hole = square(0, 0, 4), square(0, 0, 2)
    lat, lon = polygon_centroid([[outer, hole[::-1]]])
    c = Polygon(outer, [hole]).centroid
    assert (lon, lat) == pytest.approx((c.x, c.y))


def test_points_in_polygon_matches_shapely():
    rng = np.random.default_rng(1)
    ring = square(1, 1, 3)
    pts = rng.uniform(0, 5, size=(500, 2))
    got = points_in_polygon(pts[:, 0], pts[:, 1], [[ring]])
    want = [Polygon(ring).contains(Point(p)) for p in pts]
    assert np.array_equal(got, want)


def test_zone_assign_and_roundtrip(tmp_path):
    zones = ZoneMap(["a", "b"], {"a": [[square(0, 0)]], "b": [[square(1, 0)]]}, {"a": "c1", "b": "c2"})
    got = zones.assign(np.array([0.5, 0.5, 5.0]), np.array([0.5, 1.5, 5.0]))
    assert got.tolist() == ["a", "b", None]
    assert zones.centroid("b") == pytest.approx((0.5, 1.5))
    zones.to_geojson(tmp_path / "z.geojson")
    doc = json.loads((tmp_path / "z.geojson").read_text())
    assert doc["schema_version"] == 1
    back = ZoneMap.from_geojson(tmp_path / "z.geojson")
    assert back.ids == ["a", "b"] and back.county == {"a": "c1", "b": "c2"}
    with pytest.raises(GeometryError):
        zones.centroid("missing")


def test_segments_intersect_cases():
    e = np.array([0.0, 0.0, 2.0, 0.0])
    assert segments_intersect(np.array([1.0, -1.0]), np.array([1.0, 1.0]), e)  # proper
    assert segments_intersect(np.array([1.0, 0.0]), np.array([1.0, 1.0]), e)  # touching
    assert segments_intersect(np.array([2.0, 0.0]), np.array([3.0, 0.0]), e)  # collinear endpoint
    assert not segments_intersect(np.array([3.0, 0.0]), np.array([4.0, 0.0]), e)  # collinear apart
    assert not segments_intersect(np.array([0.0, 1.0]), np.array([2.0, 1.0]), e)  # parallel


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_crossings_match_shapely(seed):
    layer, p, q = oracles.crossing_scene(np.random.default_rng(seed), n_segments=10)
    assert np.array_equal(crossing_counts(p, q, layer), oracles.brute_crossings(layer, p, q))


def test_area_barrier_counts_segment_inside():
    park = BarrierLayer("park", [BarrierGeometry("park", True, [square(0, 0, 10)])])
    p, q = np.array([[2.0, 2.0]]), np.array([[3.0, 3.0]])
    assert crossing_counts(p, q, park).tolist() == [1]


def test_count_crossings_symmetric():
    zones = ZoneMap(["a", "b"], {"a": [[square(0, 0)]], "b": [[square(4, 0)]]}, {})
    road = BarrierLayer("highway", [BarrierGeometry("highway", False, [np.array([[2.5, -3.0], [2.5, 3.0]])]),
                                    BarrierGeometry("highway", False, [np.array([[9.0, -3.0], [9.0, 3.0]])])])
    assert count_crossings("a", "b", road, zones) == 1
    assert count_crossings("b", "a", road, zones) == 1


def test_barrier_layer_validation(tmp_path):
    with pytest.raises(GeometryError):
        BarrierLayer("fence", [BarrierGeometry("fence", False, [np.zeros((2, 2))])])
    with pytest.raises(GeometryError):
        BarrierLayer("park", [])
    layers = {"park": BarrierLayer("park", [BarrierGeometry("park", True, [square(0, 0)])]),
              "railway": BarrierLayer("railway", [BarrierGeometry("railway", False, [np.array([[0, 0], [1, 1.0]])])])}
    barrier_layers_to_geojson(layers, tmp_path / "b.geojson")
    back = load_barrier_layers(tmp_path / "b.geojson")
    assert sorted(back) == ["park", "railway"]
    assert back["park"].geometries[0].is_area
    assert np.array_equal(back["railway"].geometries[0].lines[0], [[0, 0], [1, 1]])


@given(st.lists(lattice, min_size=1, max_size=25))
def test_convex_hull_matches_shapely(points):
    pts = np.array(points, dtype=float)
    hull = convex_hull(pts)
    ref = MultiPoint(points).convex_hull
    if len(hull) >= 3:
        assert Polygon(hull).area == pytest.approx(ref.area)
        # counter-clockwise
        assert Polygon(hull).exterior.is_ccw
    assert points_in_hull(hull, pts[:, 0], pts[:, 1]).all()


@given(st.lists(lattice, min_size=1, max_size=12), st.lists(lattice, min_size=1, max_size=30))
def test_points_in_hull_caratheodory(vertices, queries):
    v = np.array(vertices, dtype=float)
    q = np.array(queries, dtype=float)
    hull = convex_hull(v)
    got = points_in_hull(hull, q[:, 0], q[:, 1])
    if len(v) >= 3:
        want = oracles.in_some_triangle(v, q)
    else:
        want = oracles.in_some_triangle(np.vstack([v, v[:1]]), q) if len(v) == 2 else (q == v[0]).all(axis=1)
    assert np.array_equal(got, want)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hull_poi_counts_brute_force(seed):
    zones, records, cats, expected = oracles.hull_scene(np.random.default_rng(seed))
    got = hull_poi_counts([("A", "B")], PoiTable.from_records(records), zones, cats)[0]
    assert np.array_equal(got, expected)


def test_hull_poi_count_excludes_category():
    zones = ZoneMap(["a", "b"], {"a": [[square(0, 0)]], "b": [[square(2, 0)]]}, {})
    pois = PoiTable.from_records([("p1", 0.5, 1.5, "Food"), ("p2", 0.5, 2.5, "City / Outdoors"),
                                  ("p3", 5.0, 5.0, "Food")])
    assert hull_poi_count("a", "b", pois, zones, "City / Outdoors") == 1
    assert hull_poi_count("a", "b", pois, zones, None) == 2


def test_poi_table_csv(tmp_path):
    (tmp_path / "p.csv").write_text("poi_id,lat,lon,category\n007,1.5,2.5,Food\n")
    t = PoiTable.from_csv(tmp_path / "p.csv")
    assert t.poi_id.tolist() == ["007"] and t.lat.tolist() == [1.5]
    (tmp_path / "bad.csv").write_text("poi_id,lat\n1,2\n")
    with pytest.raises(GeometryError):
        PoiTable.from_csv(tmp_path / "bad.csv")
