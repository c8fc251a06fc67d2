"""Geometric primitives for zone pairs.

Planar work (centroids, segment crossings, convex hulls) is done directly in
(lon, lat) degree coordinates. The equirectangular projection about any
origin is an affine map of (lon, lat), and orientation signs, containment and
area-weighted centroids are all affine-equivariant, so the results are
identical to computing in the local projection about the pair midpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import pandas as pd

EARTH_RADIUS_KM = 6371.0088

BARRIER_KINDS = ("highway", "railway", "park", "waterway")


class GeometryError(ValueError):
    pass


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; accepts scalars or arrays."""
    p1, l1, p2, l2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((p2 - p1) / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def great_circle(a, b) -> float:
    """Distance in km between two ``(lat, lon)`` tuples."""
    return float(haversine(a[0], a[1], b[0], b[1]))


def local_projection(lat, lon, lat0, lon0):
    """Equirectangular projection to km about ``(lat0, lon0)``."""
    x = np.radians(np.asarray(lon) - lon0) * EARTH_RADIUS_KM * np.cos(np.radians(lat0))
    y = np.radians(np.asarray(lat) - lat0) * EARTH_RADIUS_KM
    return x, y


# --- polygons -------------------------------------------------------------

def _ring_area_centroid(ring: np.ndarray) -> tuple[float, float, float]:
    x, y = ring[:, 0], ring[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    if area == 0.0:
        return 0.0, float(x.mean()), float(y.mean())
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), float(cx), float(cy)


def polygon_centroid(parts: list[list[np.ndarray]]) -> tuple[float, float]:
    """Area-weighted centroid ``(lat, lon)`` of a (multi)polygon.

    ``parts`` is a list of polygons, each a list of rings of ``(lon, lat)``
    vertices with the exterior first. Holes subtract area regardless of the
    winding they were stored with.
    """
    total = sx = sy = 0.0
    for rings in parts:
        for k, ring in enumerate(rings):
            a, cx, cy = _ring_area_centroid(ring)
            a = abs(a) if k == 0 else -abs(a)
            total += a
            sx += a * cx
            sy += a * cy
    if total == 0.0:
        pts = np.vstack([r for rings in parts for r in rings])
        return float(pts[:, 1].mean()), float(pts[:, 0].mean())
    return sy / total, sx / total


def points_in_polygon(lon, lat, parts: list[list[np.ndarray]]) -> np.ndarray:
    """Even-odd containment of many points in one (multi)polygon."""
    px = np.atleast_1d(np.asarray(lon, dtype=float))
    py = np.atleast_1d(np.asarray(lat, dtype=float))
    inside = np.zeros(px.shape, dtype=bool)
    for rings in parts:
        for ring in rings:
            x1, y1 = ring[:, 0], ring[:, 1]
            x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
            for a, b, c, d in zip(x1, y1, x2, y2):
                if b == d:
                    continue
                straddle = (b > py) != (d > py)
                xint = a + (py - b) * (c - a) / (d - b)
                inside ^= straddle & (px < xint)
    return inside


def _parts_from_geojson(geom: dict) -> list[list[np.ndarray]]:
    def ring(coords):
        arr = np.asarray(coords, dtype=float)[:, :2]
        if len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
            arr = arr[:-1]
        return arr

    if geom["type"] == "Polygon":
        return [[ring(r) for r in geom["coordinates"]]]
    if geom["type"] == "MultiPolygon":
        return [[ring(r) for r in poly] for poly in geom["coordinates"]]
    raise GeometryError(f"zone geometry must be Polygon or MultiPolygon, got {geom['type']}")


def _parts_to_geojson(parts: list[list[np.ndarray]]) -> dict:
    def close(r):
        r = r.tolist()
        return r + [r[0]]

    if len(parts) == 1:
        return {"type": "Polygon", "coordinates": [close(r) for r in parts[0]]}
    return {"type": "MultiPolygon", "coordinates": [[close(r) for r in p] for p in parts]}


@dataclass
class ZoneMap:
    """Zone polygons, centroids and county membership.

    ``county`` may be partial when the zones file lacks ``county_id``; the
    demographics table then supplies it.
    """

    ids: list[str]
    parts: dict[str, list[list[np.ndarray]]]
    county: dict[str, str]
    centroid_lat: np.ndarray = field(init=False)
    centroid_lon: np.ndarray = field(init=False)
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {z: k for k, z in enumerate(self.ids)}
        cents = [polygon_centroid(self.parts[z]) for z in self.ids]
        self.centroid_lat = np.array([c[0] for c in cents], dtype=float)
        self.centroid_lon = np.array([c[1] for c in cents], dtype=float)
        if not (np.isfinite(self.centroid_lat).all() and np.isfinite(self.centroid_lon).all()):
            raise GeometryError("non-finite zone centroid")

    def __len__(self):
        return len(self.ids)

    def __contains__(self, zone):
        return zone in self.index

    def centroid(self, zone: str) -> tuple[float, float]:
        k = self._idx(zone)
        return float(self.centroid_lat[k]), float(self.centroid_lon[k])

    def vertices(self, zone: str) -> np.ndarray:
        self._idx(zone)
        return np.vstack([r for rings in self.parts[zone] for r in rings])

    def _idx(self, zone):
        try:
            return self.index[zone]
        except KeyError:
            raise GeometryError(f"unknown zone {zone!r}") from None

    def assign(self, lat, lon) -> np.ndarray:
        """Point-in-polygon zone lookup; unmatched points get ``None``."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        out = np.full(lat.shape, None, dtype=object)
        todo = np.ones(lat.shape, dtype=bool)
        for z in self.ids:
            verts = self.vertices(z)
            box = (
                todo
                & (lon >= verts[:, 0].min()) & (lon <= verts[:, 0].max())
                & (lat >= verts[:, 1].min()) & (lat <= verts[:, 1].max())
            )
            if not box.any():
                continue
            sel = np.flatnonzero(box)
            hit = sel[points_in_polygon(lon[sel], lat[sel], self.parts[z])]
            out[hit] = z
            todo[hit] = False
        return out

    @classmethod
    def from_geojson(cls, path) -> "ZoneMap":
        doc = json.loads(Path(path).read_text())
        ids, parts, county = [], {}, {}
        for feat in doc["features"]:
            props = feat.get("properties") or {}
            if "zone_id" not in props:
                raise GeometryError("zone feature without zone_id property")
            z = str(props["zone_id"])
            ids.append(z)
            parts[z] = _parts_from_geojson(feat["geometry"])
            if props.get("county_id") is not None:
                county[z] = str(props["county_id"])
        return cls(ids, parts, county)

    def to_geojson(self, path) -> None:
        feats = [
            {
                "type": "Feature",
                "properties": {"zone_id": z, "county_id": self.county[z]},
                "geometry": _parts_to_geojson(self.parts[z]),
            }
            for z in self.ids
        ]
        Path(path).write_text(json.dumps({"type": "FeatureCollection", "schema_version": 1, "features": feats}))


# --- barrier layers ----------------------------------------------------------

@dataclass
class BarrierGeometry:
    """A polygon (closed rings, area) or a polyline (open line strings)."""

    kind: str
    is_area: bool
    lines: list[np.ndarray]

    def edges(self) -> np.ndarray:
        out = []
        for ln in self.lines:
            nxt = np.roll(ln, -1, axis=0) if self.is_area else ln[1:]
            cur = ln if self.is_area else ln[:-1]
            out.append(np.hstack([cur, nxt]))
        return np.vstack(out) if out else np.zeros((0, 4))


@dataclass
class BarrierLayer:
    kind: str
    geometries: list[BarrierGeometry]

    def __post_init__(self):
        if self.kind not in BARRIER_KINDS:
            raise GeometryError(f"barrier kind must be one of {BARRIER_KINDS}, got {self.kind!r}")
        if not self.geometries:
            raise GeometryError(f"empty {self.kind} layer")


def _barrier_from_geojson(kind: str, geom: dict) -> list[BarrierGeometry]:
    t = geom["type"]
    c = geom["coordinates"]
    if t == "LineString":
        return [BarrierGeometry(kind, False, [np.asarray(c, dtype=float)[:, :2]])]
    if t == "MultiLineString":
        return [BarrierGeometry(kind, False, [np.asarray(l, dtype=float)[:, :2] for l in c])]
    if t in ("Polygon", "MultiPolygon"):
        rings = [r for part in _parts_from_geojson(geom) for r in part]
        return [BarrierGeometry(kind, True, rings)]
    raise GeometryError(f"unsupported barrier geometry {t}")


def load_barrier_layers(path) -> dict[str, BarrierLayer]:
    """Read a FeatureCollection whose features carry a ``kind`` property."""
    doc = json.loads(Path(path).read_text())
    by_kind: dict[str, list[BarrierGeometry]] = {}
    for feat in doc["features"]:
        kind = (feat.get("properties") or {}).get("kind")
        if kind not in BARRIER_KINDS:
            raise GeometryError(f"barrier feature with invalid kind {kind!r}")
        by_kind.setdefault(kind, []).extend(_barrier_from_geojson(kind, feat["geometry"]))
    return {k: BarrierLayer(k, g) for k, g in by_kind.items()}


def barrier_layers_to_geojson(layers: dict[str, BarrierLayer], path) -> None:
    feats = []
    for kind in sorted(layers):
        for g in layers[kind].geometries:
            if g.is_area:
                geom = {"type": "Polygon", "coordinates": [r.tolist() + [r[0].tolist()] for r in g.lines]}
            elif len(g.lines) == 1:
                geom = {"type": "LineString", "coordinates": g.lines[0].tolist()}
            else:
                geom = {"type": "MultiLineString", "coordinates": [l.tolist() for l in g.lines]}
            feats.append({"type": "Feature", "properties": {"kind": kind}, "geometry": geom})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "schema_version": 1, "features": feats}))


# --- segment crossings ------------------------------------------------------

def _orient(ax, ay, bx, by, cx, cy):
    return np.sign((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


def _on_segment(ax, ay, bx, by, cx, cy):
    return (
        (np.minimum(ax, bx) <= cx) & (cx <= np.maximum(ax, bx))
        & (np.minimum(ay, by) <= cy) & (cy <= np.maximum(ay, by))
    )


def segments_intersect(p, q, e):
    """Closed-segment intersection, broadcasting.

    ``p`` and ``q`` are the endpoints of the query segments with shape
    ``(..., 2)``; ``e`` holds edges as ``(..., 4)`` rows ``x1, y1, x2, y2``.
    """
    ax, ay, bx, by = p[..., 0], p[..., 1], q[..., 0], q[..., 1]
    cx, cy, dx, dy = e[..., 0], e[..., 1], e[..., 2], e[..., 3]
    o1 = _orient(ax, ay, bx, by, cx, cy)
    o2 = _orient(ax, ay, bx, by, dx, dy)
    o3 = _orient(cx, cy, dx, dy, ax, ay)
    o4 = _orient(cx, cy, dx, dy, bx, by)
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit |= (o1 == 0) & _on_segment(ax, ay, bx, by, cx, cy)
    hit |= (o2 == 0) & _on_segment(ax, ay, bx, by, dx, dy)
    hit |= (o3 == 0) & _on_segment(cx, cy, dx, dy, ax, ay)
    hit |= (o4 == 0) & _on_segment(cx, cy, dx, dy, bx, by)
    return hit


def _geometry_hits(geom: BarrierGeometry, p: np.ndarray, q: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Which of the segments ``p[k]-q[k]`` touch ``geom``."""
    edges = geom.edges()
    lo = np.minimum(edges[:, [0, 1]].min(axis=0), edges[:, [2, 3]].min(axis=0))
    hi = np.maximum(edges[:, [0, 1]].max(axis=0), edges[:, [2, 3]].max(axis=0))
    seg_lo = np.minimum(p, q)
    seg_hi = np.maximum(p, q)
    near = np.flatnonzero(((seg_hi >= lo) & (seg_lo <= hi)).all(axis=1))
    hits = np.zeros(len(p), dtype=bool)
    for s in range(0, len(near), chunk):
        idx = near[s:s + chunk]
        crossed = segments_intersect(p[idx, None, :], q[idx, None, :], edges[None, :, :]).any(axis=1)
        if geom.is_area:
            # a segment that never meets the boundary is inside iff an endpoint is
            rest = idx[~crossed]
            if len(rest):
                crossed[~crossed] = points_in_polygon(p[rest, 0], p[rest, 1], [geom.lines])
        hits[idx] = crossed
    return hits


def crossing_counts(p: np.ndarray, q: np.ndarray, layer: BarrierLayer) -> np.ndarray:
    """Per segment, the number of layer geometries it intersects."""
    counts = np.zeros(len(p), dtype=np.int64)
    for g in layer.geometries:
        counts += _geometry_hits(g, p, q)
    return counts


def count_crossings(a: str, b: str, layer: BarrierLayer, zones: ZoneMap) -> int:
    """Geometries of ``layer`` met by the centroid-to-centroid segment of ``a``, ``b``."""
    la, lo_a = zones.centroid(a)
    lb, lo_b = zones.centroid(b)
    # canonical endpoint order keeps the float predicates symmetric in (a, b)
    ends = sorted([(lo_a, la), (lo_b, lb)])
    p = np.array([ends[0]], dtype=float)
    q = np.array([ends[1]], dtype=float)
    return int(crossing_counts(p, q, layer)[0])


# --- convex hulls -------------------------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


@numba.njit(cache=True)
def _in_hull(hull, x, y):
    n = hull.shape[0]
    if n == 1:
        return x == hull[0, 0] and y == hull[0, 1]
    if n == 2:
        ax, ay, bx, by = hull[0, 0], hull[0, 1], hull[1, 0], hull[1, 1]
        c = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        return (c == 0.0 and min(ax, bx) <= x <= max(ax, bx) and min(ay, by) <= y <= max(ay, by))
    for k in range(n):
        ax, ay = hull[k, 0], hull[k, 1]
        bx, by = hull[(k + 1) % n, 0], hull[(k + 1) % n, 1]
        if (bx - ax) * (y - ay) - (by - ay) * (x - ax) < 0.0:
            return False
    return True


@numba.njit(cache=True)
def _count_in_hull(hull, xs, ys, cats, n_cat, out_row):
    # xs sorted ascending; only the hull's x-range is scanned
    xmin, xmax = hull[:, 0].min(), hull[:, 0].max()
    ymin, ymax = hull[:, 1].min(), hull[:, 1].max()
    start = np.searchsorted(xs, xmin, side="left")
    for k in range(start, xs.shape[0]):
        x = xs[k]
        if x > xmax:
            break
        y = ys[k]
        if y < ymin or y > ymax:
            continue
        if _in_hull(hull, x, y):
            out_row[cats[k]] += 1


def points_in_hull(hull: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Inclusive membership of points in a hull from :func:`convex_hull`."""
    h = np.ascontiguousarray(hull, dtype=float)
    return np.array([_in_hull(h, float(a), float(b)) for a, b in zip(np.ravel(x), np.ravel(y))], dtype=bool)


@dataclass
class PoiTable:
    """Columnar POI store: ``poi_id``, ``lat``, ``lon``, ``category``."""

    poi_id: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    category: np.ndarray

    def __len__(self):
        return len(self.poi_id)

    @classmethod
    def from_records(cls, records) -> "PoiTable":
        rec = list(records)
        return cls(
            np.array([str(r[0]) for r in rec], dtype=object),
            np.array([float(r[1]) for r in rec], dtype=float),
            np.array([float(r[2]) for r in rec], dtype=float),
            np.array([str(r[3]) for r in rec], dtype=object),
        )

    @classmethod
    def from_csv(cls, path) -> "PoiTable":
        df = pd.read_csv(path, dtype={"poi_id": str, "category": str}, keep_default_na=False)
        missing = [c for c in ("poi_id", "lat", "lon", "category") if c not in df.columns]
        if missing:
            raise GeometryError(f"POI CSV missing columns {missing}; have {list(df.columns)}")
        return cls(df["poi_id"].to_numpy(object), df["lat"].to_numpy(float), df["lon"].to_numpy(float),
                   df["category"].to_numpy(object))


def hull_poi_counts(
    pairs: list[tuple[str, str]],
    pois: PoiTable,
    zones: ZoneMap,
    categories: list[str],
) -> np.ndarray:
    """POI counts per category inside the pooled-vertex hull of each zone pair.

    Returns an ``(n_pairs, len(categories))`` integer matrix. POIs of
    ``excluded_category`` are still tallied in their own column so callers can
    drop it from the intervening-opportunity total.
    """
    cat_index = {c: k for k, c in enumerate(categories)}
    try:
        cats = np.array([cat_index[c] for c in pois.category], dtype=np.int64)
    except KeyError as exc:
        raise GeometryError(f"unknown POI category {exc.args[0]!r}") from None
    order = np.argsort(pois.lon, kind="stable")
    xs = np.ascontiguousarray(pois.lon[order])
    ys = np.ascontiguousarray(pois.lat[order])
    cs = np.ascontiguousarray(cats[order])
    out = np.zeros((len(pairs), len(categories)), dtype=np.int64)
    verts = {}
    for k, (a, b) in enumerate(pairs):
        for z in (a, b):
            if z not in verts:
                verts[z] = zones.vertices(z)
        hull = np.ascontiguousarray(convex_hull(np.vstack([verts[a], verts[b]])))
        _count_in_hull(hull, xs, ys, cs, len(categories), out[k])
    return out


def hull_poi_count(a: str, b: str, pois: PoiTable, zones: ZoneMap, excluded_category: str | None,
                   categories: list[str] | None = None) -> int:
    """Intervening-opportunity count for one pair, minus ``excluded_category``."""
    cats = categories if categories is not None else sorted(set(pois.category))
    if excluded_category is not None and excluded_category not in cats:
        cats = list(cats) + [excluded_category]
    row = hull_poi_counts([(a, b)], pois, zones, list(cats))[0]
    keep = [k for k, c in enumerate(cats) if c != excluded_category]
    return int(row[keep].sum())
