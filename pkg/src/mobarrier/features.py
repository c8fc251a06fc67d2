"""Per-pair regression features: amenities, crossings, demographics, county."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .geo import BARRIER_KINDS, BarrierLayer, PoiTable, ZoneMap, crossing_counts, haversine, hull_poi_counts

log = logging.getLogger(__name__)

# 20-way activity taxonomy; POI files arrive already mapped onto it
CATEGORIES = (
    "Food", "Shopping", "Grocery", "Service", "Office", "College", "School", "Health",
    "Transportation", "Entertainment", "Sports", "Arts / Museum", "Nightlife", "Religion",
    "Hotel", "Automotive", "Government", "Residential", "Personal Care", "City / Outdoors",
)
EXCLUDED_CATEGORY = "City / Outdoors"
MAX_PAIR_KM = 20.0

DEMO_SCALARS = ("median_housing_value", "transit_share", "employed_ratio", "poverty_ratio",
                "racial_diversity", "population")


class FeatureError(ValueError):
    pass


@dataclass
class DemographicProfile:
    zone_id: str
    race_dist: np.ndarray
    median_housing_value: float
    transit_share: float
    employed_ratio: float = float("nan")
    poverty_ratio: float = float("nan")
    racial_diversity: float = float("nan")
    population: float = float("nan")
    county_id: str | None = None

    def __post_init__(self):
        r = np.asarray(self.race_dist, dtype=float)
        if (r < 0).any() or abs(r.sum() - 1.0) > 1e-9:
            raise FeatureError(f"{self.zone_id}: race distribution must be nonnegative and sum to 1")
        if not 0.0 <= self.transit_share <= 1.0:
            raise FeatureError(f"{self.zone_id}: transit_share outside [0, 1]")
        self.race_dist = r


@dataclass
class PairFeatureRow:
    zone_i: str
    zone_j: str
    d_phys_km: float
    bin_index: int
    poi_interv: int
    poi_interv_by_cat: dict = field(default_factory=dict)
    poi_js: float = 0.0
    crossings: dict = field(default_factory=dict)
    race_dist_js: float = 0.0
    income_diff: float = 0.0
    transit_diff: float = 0.0
    cross_county: int = 0
    d_embed: float = float("nan")
    label: int | None = None


def read_demographics(path) -> dict[str, DemographicProfile]:
    df = pd.read_csv(path, dtype={"zone_id": str, "county_id": str})
    race_cols = sorted((c for c in df.columns if c.startswith("race_cat_")), key=lambda c: int(c.rsplit("_", 1)[1]))
    need = ["zone_id", "median_housing_value", "transit_share"]
    missing = [c for c in need if c not in df.columns] + ([] if race_cols else ["race_cat_1..K"])
    if missing:
        raise FeatureError(f"demographics CSV missing columns {missing}")
    out = {}
    for rec in df.to_dict("records"):
        out[rec["zone_id"]] = DemographicProfile(
            rec["zone_id"],
            np.array([rec[c] for c in race_cols], dtype=float),
            **{k: float(rec[k]) for k in DEMO_SCALARS if k in rec},
            county_id=rec.get("county_id"),
        )
    return out


def js_distance(p, q) -> float:
    """Jensen-Shannon distance with base-2 logs, in [0, 1]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise FeatureError("distributions of different length")
    for v in (p, q):
        if (v < 0).any() or abs(v.sum() - 1.0) > 1e-9:
            raise FeatureError("inputs must be normalized probability vectors")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    div = 0.5 * (kl(p) + kl(q))
    return math.sqrt(max(div, 0.0))


def js_distance_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise :func:`js_distance` for pre-validated matrices."""
    M = 0.5 * (P + Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(P > 0, P * np.log2(P / M), 0.0)
        tq = np.where(Q > 0, Q * np.log2(Q / M), 0.0)
    return np.sqrt(np.maximum(0.5 * (tp.sum(axis=1) + tq.sum(axis=1)), 0.0))


def category_profiles(zones: ZoneMap, pois: PoiTable, categories=CATEGORIES) -> np.ndarray:
    """Normalized category histogram per zone (rows follow ``zones.ids``).

    POIs are placed by point-in-polygon; a zone with no POIs gets the uniform
    vector so that JS distances stay defined.
    """
    cat_index = {c: k for k, c in enumerate(categories)}
    unknown = set(pois.category) - set(cat_index)
    if unknown:
        raise FeatureError(f"unknown POI categories: {sorted(unknown)[:5]}")
    counts = np.zeros((len(zones), len(categories)))
    where = zones.assign(pois.lat, pois.lon)
    for z, c in zip(where, pois.category):
        if z is not None:
            counts[zones.index[z], cat_index[c]] += 1
    tot = counts.sum(axis=1, keepdims=True)
    return np.where(tot > 0, counts / np.where(tot > 0, tot, 1), 1.0 / len(categories))


def poi_category_profile(zone_id: str, pois: PoiTable, zones: ZoneMap, categories=CATEGORIES) -> np.ndarray:
    return category_profiles(zones, pois, categories)[zones.index[zone_id]]


def candidate_pairs(zones: ZoneMap, max_km: float = MAX_PAIR_KM) -> tuple[list[tuple[str, str]], np.ndarray]:
    """Unordered zone pairs ``(a, b)``, ``a < b``, within ``max_km``; sorted."""
    order = np.argsort(np.array(zones.ids, dtype=object))
    ids = [zones.ids[k] for k in order]
    lat, lon = zones.centroid_lat[order], zones.centroid_lon[order]
    pairs, dists = [], []
    for i in range(len(ids) - 1):
        d = haversine(lat[i], lon[i], lat[i + 1:], lon[i + 1:])
        for j in np.flatnonzero((d <= max_km) & (d > 0)):
            pairs.append((ids[i], ids[i + 1 + j]))
            dists.append(d[j])
    return pairs, np.asarray(dists, dtype=float)


def distance_bin(d_km) -> np.ndarray:
    """1 km bins, right-closed: bin ``b`` holds ``(b - 1, b]``."""
    return np.ceil(np.asarray(d_km, dtype=float)).astype(np.int64)


def _cat_col(c: str) -> str:
    return "poi_" + "".join(ch if ch.isalnum() else "_" for ch in c.lower()).strip("_").replace("__", "_")


CATEGORY_COLUMNS = {c: _cat_col(c) for c in CATEGORIES}
CROSSING_COLUMNS = {k: f"cross_{k}" for k in BARRIER_KINDS}


def assemble_pair_features(zones: ZoneMap, pois: PoiTable, layers: dict[str, BarrierLayer],
                           demo: dict[str, DemographicProfile], pairs=None, max_km: float = MAX_PAIR_KM,
                           categories=CATEGORIES, excluded_category: str = EXCLUDED_CATEGORY) -> pd.DataFrame:
    """One row per unordered pair within ``max_km``.

    Columns: ``zone_i, zone_j, d_phys_km, bin_index, poi_interv, poi_js,
    race_dist_js, income_diff, transit_diff, cross_county``, one
    ``poi_<category>`` column per category and one ``cross_<kind>`` column per
    barrier kind. ``df.attrs['dropped_missing_demo']`` counts pairs lacking a
    demographic row.
    """
    if pairs is None:
        pairs, dist = candidate_pairs(zones, max_km)
    else:
        pairs = [tuple(sorted(p)) for p in pairs]
        dist = np.array([haversine(*zones.centroid(a), *zones.centroid(b)) for a, b in pairs])
        keep = (dist <= max_km) & (dist > 0)
        pairs = [p for p, k in zip(pairs, keep) if k]
        dist = dist[keep]
    has_demo = np.array([a in demo and b in demo for a, b in pairs], dtype=bool)
    dropped = int((~has_demo).sum())
    if dropped:
        log.warning("%d pairs dropped for missing demographics", dropped)
    pairs = [p for p, k in zip(pairs, has_demo) if k]
    dist = dist[has_demo]

    ia = np.array([zones.index[a] for a, _ in pairs], dtype=np.int64)
    ib = np.array([zones.index[b] for _, b in pairs], dtype=np.int64)
    df = pd.DataFrame({"zone_i": [a for a, _ in pairs], "zone_j": [b for _, b in pairs],
                       "d_phys_km": dist, "bin_index": distance_bin(dist)})

    cats = list(categories)
    hull = hull_poi_counts(pairs, pois, zones, cats) if pairs else np.zeros((0, len(cats)), dtype=np.int64)
    for k, c in enumerate(cats):
        df[_cat_col(c)] = hull[:, k]
    keep_cols = [k for k, c in enumerate(cats) if c != excluded_category]
    df["poi_interv"] = hull[:, keep_cols].sum(axis=1)

    prof = category_profiles(zones, pois, cats)
    df["poi_js"] = js_distance_rows(prof[ia], prof[ib]) if pairs else []

    # canonical endpoint order (lexicographic on lon, lat) keeps crossings symmetric
    pa = np.column_stack([zones.centroid_lon[ia], zones.centroid_lat[ia]])
    pb = np.column_stack([zones.centroid_lon[ib], zones.centroid_lat[ib]])
    swap = (pa[:, 0] > pb[:, 0]) | ((pa[:, 0] == pb[:, 0]) & (pa[:, 1] > pb[:, 1]))
    p = np.where(swap[:, None], pb, pa)
    q = np.where(swap[:, None], pa, pb)
    for kind in BARRIER_KINDS:
        layer = layers.get(kind)
        df[CROSSING_COLUMNS[kind]] = crossing_counts(p, q, layer) if layer is not None and pairs else 0

    race = {z: demo[z].race_dist for z in demo}
    df["race_dist_js"] = js_distance_rows(np.array([race[a] for a, _ in pairs]),
                                          np.array([race[b] for _, b in pairs])) if pairs else []
    df["income_diff"] = [abs(demo[a].median_housing_value - demo[b].median_housing_value) for a, b in pairs]
    df["transit_diff"] = [abs(demo[a].transit_share - demo[b].transit_share) for a, b in pairs]

    def county(z):
        c = demo[z].county_id
        c = c if isinstance(c, str) else zones.county.get(z)
        if c is None:
            raise FeatureError(f"zone {z} has no county_id")
        return c

    df["cross_county"] = [int(county(a) != county(b)) for a, b in pairs]
    df.attrs["dropped_missing_demo"] = dropped
    return df


def feature_rows(df: pd.DataFrame) -> list[PairFeatureRow]:
    """Materialize a feature table as :class:`PairFeatureRow` objects."""
    rows = []
    for rec in df.to_dict("records"):
        rows.append(PairFeatureRow(
            rec["zone_i"], rec["zone_j"], rec["d_phys_km"], int(rec["bin_index"]), int(rec["poi_interv"]),
            {c: int(rec[col]) for c, col in CATEGORY_COLUMNS.items() if col in rec},
            rec["poi_js"],
            {k: int(rec[col]) for k, col in CROSSING_COLUMNS.items()},
            rec["race_dist_js"], rec["income_diff"], rec["transit_diff"], int(rec["cross_county"]),
            rec.get("d_embed", float("nan")),
            None if rec.get("label") is None or rec.get("label") != rec.get("label") else int(rec["label"]),
        ))
    return rows
