"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np
from mpmath import mp, mpf
from shapely.geometry import LineString, Point, Polygon

from mobarrier.geo import BarrierGeometry, BarrierLayer, ZoneMap

mp.dps = 50


# --- convex hulls ---------------------------------------------------------------

def lattice_polygon(rng, lo=0, hi=12):
    """Random non-degenerate lattice triangle or axis-aligned rectangle."""
    while True:
        if rng.random() < 0.5:
            pts = rng.integers(lo, hi + 1, size=(3, 2))
            a, b, c = pts
            if (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) != 0:
                return pts.astype(float)
        else:
            x = np.sort(rng.choice(np.arange(lo, hi + 1), 2, replace=False))
            y = np.sort(rng.choice(np.arange(lo, hi + 1), 2, replace=False))
            return np.array([[x[0], y[0]], [x[1], y[0]], [x[1], y[1]], [x[0], y[1]]], dtype=float)


def in_some_triangle(vertices: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Closed convex-hull membership by Caratheodory: inside iff in a vertex triangle.

    Integer inputs keep every orientation sign exact.
    """
    v = np.asarray(vertices, dtype=np.int64)
    p = np.asarray(pts, dtype=np.int64)
    inside = np.zeros(len(p), dtype=bool)
    for i, j, k in itertools.combinations(range(len(v)), 3):
        a, b, c = v[i], v[j], v[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area == 0:
            # degenerate triangle: points on the longest side
            for s, t in ((a, b), (b, c), (a, c)):
                cr = (t[0] - s[0]) * (p[:, 1] - s[1]) - (t[1] - s[1]) * (p[:, 0] - s[0])
                box = ((np.minimum(s[0], t[0]) <= p[:, 0]) & (p[:, 0] <= np.maximum(s[0], t[0]))
                       & (np.minimum(s[1], t[1]) <= p[:, 1]) & (p[:, 1] <= np.maximum(s[1], t[1])))
                inside |= (cr == 0) & box
            continue
        sgn = np.sign(area)
        d1 = sgn * ((b[0] - a[0]) * (p[:, 1] - a[1]) - (b[1] - a[1]) * (p[:, 0] - a[0]))
        d2 = sgn * ((c[0] - b[0]) * (p[:, 1] - b[1]) - (c[1] - b[1]) * (p[:, 0] - b[0]))
        d3 = sgn * ((a[0] - c[0]) * (p[:, 1] - c[1]) - (a[1] - c[1]) * (p[:, 0] - c[0]))
        inside |= (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
    return inside


def hull_scene(rng, n_pois=30, n_cat=3):
    """Two lattice zones and lattice POIs; returns (zones, pois, categories, brute-force counts)."""
    a, b = lattice_polygon(rng), lattice_polygon(rng)
    zones = ZoneMap(["A", "B"], {"A": [[a]], "B": [[b]]}, {})
    xy = rng.integers(0, 13, size=(n_pois, 2))
    cats = [f"c{k}" for k in range(n_cat)]
    cat = rng.integers(0, n_cat, n_pois)
    inside = in_some_triangle(np.vstack([a, b]), xy)
    expected = np.bincount(cat[inside], minlength=n_cat)
    records = [(f"p{k}", float(xy[k, 1]), float(xy[k, 0]), cats[cat[k]]) for k in range(n_pois)]
    return zones, records, cats, expected


# --- segment crossings -------------------------------------------------------------

def crossing_scene(rng, n_geoms=3, n_segments=20, hi=12):
    """Random lattice barrier layer and query segments."""
    geoms = []
    for _ in range(n_geoms):
        if rng.random() < 0.4:
            geoms.append(BarrierGeometry("park", True, [lattice_polygon(rng, 0, hi)]))
        else:
            k = int(rng.integers(2, 5))
            geoms.append(BarrierGeometry("park", False, [rng.integers(0, hi + 1, size=(k, 2)).astype(float)]))
    layer = BarrierLayer("park", geoms)
    p = rng.integers(0, hi + 1, size=(n_segments, 2)).astype(float)
    q = rng.integers(0, hi + 1, size=(n_segments, 2)).astype(float)
    return layer, p, q


def brute_crossings(layer: BarrierLayer, p, q) -> np.ndarray:
    """Per segment, the number of geometries it meets (shapely predicates)."""
    shapes = []
    for g in layer.geometries:
        if g.is_area:
            shapes.append(Polygon(g.lines[0], [r for r in g.lines[1:]]))
        else:
            # shapely treats a zero-length line as empty, so a collapsed polyline becomes its point
            shapes.append([LineString(ln) if np.ptp(ln, axis=0).any() else Point(ln[0]) for ln in g.lines])
    out = np.zeros(len(p), dtype=np.int64)
    for k in range(len(p)):
        a, b = tuple(p[k]), tuple(q[k])
        seg = LineString([a, b]) if a != b else Point(a)
        for s in shapes:
            if isinstance(s, list):
                out[k] += any(seg.intersects(ln) for ln in s)
            else:
                out[k] += seg.intersects(s)
    return out


# --- Jensen-Shannon ---------------------------------------------------------------

def js_direct(p, q) -> float:
    """sqrt of 0.5 KL(P||M) + 0.5 KL(Q||M) in base 2, at 50 digits."""
    m = [(mpf(a) + mpf(b)) / 2 for a, b in zip(p, q)]
    div = mpf(0)
    for a, b, c in zip(p, q, m):
        if a > 0:
            div += mpf(a) * mp.log(mpf(a) / c, 2) / 2
        if b > 0:
            div += mpf(b) * mp.log(mpf(b) / c, 2) / 2
    return float(mp.sqrt(max(div, mpf(0))))


def random_simplex(rng, k, zeros=True):
    w = rng.gamma(0.5, 1.0, k)
    if zeros and rng.random() < 0.3:
        w[rng.random(k) < 0.3] = 0.0
    if w.sum() == 0:
        w[0] = 1.0
    return w / w.sum()


# --- logistic MLE ---------------------------------------------------------------

def grid_search_mle(X, y, center=None, width=4.0, points=21, rounds=12, shrink=4.0):
    """Coarse-to-fine exhaustive grid maximization of the Bernoulli log-likelihood."""
    p = X.shape[1]
    c = np.zeros(p) if center is None else np.asarray(center, dtype=float)
    w = width
    for _ in range(rounds):
        axes = [np.linspace(ci - w, ci + w, points) for ci in c]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
        eta = X @ grid.T
        ll = (y[:, None] * eta - np.logaddexp(0.0, eta)).sum(axis=0)
        c = grid[int(np.argmax(ll))]
        w /= shrink
    return c


def central_difference(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def nearest_rank_brute(values, q):
    v = sorted(values)
    r = max(1, math.ceil(q * len(v)))
    return v[min(r, len(v)) - 1]
