"""Stay cleaning, trajectory construction and flow-band pruning."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .geo import EARTH_RADIUS_KM, PoiTable, ZoneMap, haversine

log = logging.getLogger(__name__)

DAY = 86400

REJECT_CODES = ("BAD_TIME", "BAD_COORD", "NO_ZONE")

STAY_COLUMNS = ["user_id", "t_start", "t_end", "lat", "lon"]
OPTIONAL_STAY_COLUMNS = ["zone_id", "home_zone", "utc_offset"]


class IngestConfigError(ValueError):
    pass


class SchemaError(ValueError):
    """Input table lacks required columns."""


@dataclass(frozen=True)
class Stay:
    user_id: str
    t_start: int
    t_end: int
    lat: float
    lon: float
    zone_id: str | None = None


@dataclass
class IngestConfig:
    min_stays_total: int = 5
    min_stays_per_day: int = 2
    max_gap: float = 3600.0
    merge_radius: float = 50.0
    flow_quantile_lo: float = 0.95
    flow_quantile_hi: float = 0.995
    poi_attach_max: float = 100.0
    day_offset: int = 0  # seconds added to UTC before cutting calendar days

    def __post_init__(self):
        if not 0.0 <= self.flow_quantile_lo < self.flow_quantile_hi <= 1.0:
            raise IngestConfigError("need 0 <= flow_quantile_lo < flow_quantile_hi <= 1")
        for name in ("min_stays_total", "min_stays_per_day", "max_gap", "merge_radius", "poi_attach_max"):
            if getattr(self, name) <= 0:
                raise IngestConfigError(f"{name} must be positive")


@dataclass
class IngestReport:
    n_input: int = 0
    rejected: dict = field(default_factory=lambda: {c: 0 for c in REJECT_CODES})
    dropped_gap: int = 0
    dropped_short_day: int = 0
    dropped_user: int = 0
    pruned_flow: int = 0
    kept: int = 0

    @property
    def n_rejected(self) -> int:
        return sum(self.rejected.values())

    @property
    def n_pruned(self) -> int:
        return self.dropped_gap + self.dropped_short_day + self.dropped_user + self.pruned_flow

    def reconciles(self) -> bool:
        return self.kept + self.n_pruned + self.n_rejected == self.n_input

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(n_rejected=self.n_rejected, n_pruned=self.n_pruned)
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


@dataclass
class Trajectory:
    """One user's cleaned visits; ``segments`` are ``[start, stop)`` day slices."""

    user_id: str
    zones: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    segments: list[tuple[int, int]]
    n_records: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.zones)

    @property
    def tokens(self) -> list[tuple[str, int]]:
        return list(zip(self.zones.tolist(), self.t_start.tolist()))

    def segment_zones(self):
        for a, b in self.segments:
            yield self.zones[a:b]

    def subset(self, keep_segments: list[tuple[int, int]]) -> "Trajectory":
        idx = np.concatenate([np.arange(a, b) for a, b in keep_segments]) if keep_segments else np.zeros(0, int)
        segs, pos = [], 0
        for a, b in keep_segments:
            segs.append((pos, pos + b - a))
            pos += b - a
        return Trajectory(
            self.user_id, self.zones[idx], self.t_start[idx], self.t_end[idx],
            self.lat[idx], self.lon[idx], segs, self.n_records[idx],
            {k: v[idx] for k, v in self.extra.items()},
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({
            "user_id": self.user_id, "t_start": self.t_start, "t_end": self.t_end,
            "lat": self.lat, "lon": self.lon, "zone_id": self.zones,
        })
        for k, v in self.extra.items():
            df[k] = v
        return df


# --- loading and validation -------------------------------------------------

def stays_frame(stays) -> pd.DataFrame:
    if isinstance(stays, pd.DataFrame):
        return stays.copy()
    rows = [asdict(s) for s in stays]
    return pd.DataFrame(rows, columns=STAY_COLUMNS + ["zone_id"])


def read_stays_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"user_id": str, "zone_id": str, "home_zone": str}, keep_default_na=False,
                     na_values={"zone_id": [""], "home_zone": [""], "t_start": [""], "t_end": [""],
                                "lat": [""], "lon": [""], "utc_offset": [""]})
    missing = [c for c in STAY_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"stays CSV missing columns {missing}; have {list(df.columns)}")
    return df


def validate_stays(df: pd.DataFrame, report: IngestReport, zones: ZoneMap | None = None) -> pd.DataFrame:
    """Drop malformed rows, tallying reason codes in ``report``.

    Zone ids absent from the input are filled by point-in-polygon when
    ``zones`` is given.
    """
    df = df.copy()
    report.n_input += len(df)
    ts = pd.to_numeric(df["t_start"], errors="coerce")
    te = pd.to_numeric(df["t_end"], errors="coerce")
    bad_time = ~(np.isfinite(ts) & np.isfinite(te)) | (te < ts)
    lat = pd.to_numeric(df["lat"], errors="coerce")
    lon = pd.to_numeric(df["lon"], errors="coerce")
    bad_coord = ~bad_time & ~((lat >= -90) & (lat <= 90) & (lon >= -180) & (lon <= 180))
    df["t_start"], df["t_end"], df["lat"], df["lon"] = ts, te, lat, lon
    report.rejected["BAD_TIME"] += int(bad_time.sum())
    report.rejected["BAD_COORD"] += int(bad_coord.sum())
    df = df[~(bad_time | bad_coord)]
    if "zone_id" not in df.columns:
        df["zone_id"] = None
    if zones is not None:
        need = df["zone_id"].isna().to_numpy()
        if need.any():
            filled = zones.assign(df["lat"].to_numpy()[need], df["lon"].to_numpy()[need])
            z = df["zone_id"].to_numpy(dtype=object)
            z[need] = filled
            df["zone_id"] = z
    no_zone = df["zone_id"].isna()
    report.rejected["NO_ZONE"] += int(no_zone.sum())
    df = df[~no_zone].copy()
    df["t_start"] = df["t_start"].astype(np.int64)
    df["t_end"] = df["t_end"].astype(np.int64)
    df["user_id"] = df["user_id"].astype(str)
    df["zone_id"] = df["zone_id"].astype(str)
    return df


# --- trajectory construction ---------------------------------------------------

@numba.njit(cache=True)
def _merge_groups(group, lat, lon, radius_km):
    # each row joins the current visit while within radius of that visit's first stay
    n = group.shape[0]
    visit = np.empty(n, dtype=np.int64)
    v = -1
    alat = alon = 0.0
    for k in range(n):
        new = k == 0 or group[k] != group[k - 1]
        if not new:
            p1, p2 = math.radians(alat), math.radians(lat[k])
            dl = math.radians(lon[k] - alon)
            a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
            d = 2 * 6371.0088 * math.asin(math.sqrt(min(1.0, a)))
            new = d > radius_km
        if new:
            v += 1
            alat, alon = lat[k], lon[k]
        visit[k] = v
    return visit


def build_trajectories(stays, cfg: IngestConfig, report: IngestReport | None = None,
                       zones: ZoneMap | None = None):
    """Apply the four cleaning rules and return ``(trajectories, report)``.

    Rules are applied so that the output is a fixed point: stays are merged
    within each day first, then days with an over-long gap or too few visits
    are dropped, and finally users with too few surviving visits.
    """
    report = report if report is not None else IngestReport()
    df = validate_stays(stays_frame(stays), report, zones)
    if df.empty:
        return [], report

    extra_cols = [c for c in ("home_zone", "utc_offset") if c in df.columns]
    df = df.sort_values(["user_id", "t_start", "t_end"], kind="stable").reset_index(drop=True)
    day = (df["t_start"].to_numpy() + cfg.day_offset) // DAY
    ucode = pd.factorize(df["user_id"])[0]
    group = ucode.astype(np.int64) * (1 << 32) + (day - day.min())
    df["_grp"] = group
    df["_visit"] = _merge_groups(group, df["lat"].to_numpy(float), df["lon"].to_numpy(float),
                                 cfg.merge_radius / 1000.0)

    agg = {"user_id": "first", "_grp": "first", "zone_id": "first", "t_start": "min", "t_end": "max",
           "lat": "first", "lon": "first"}
    agg.update({c: "first" for c in extra_cols})
    visits = df.groupby("_visit", sort=True).agg(agg)
    visits["n_records"] = df.groupby("_visit", sort=True).size()

    prev_end = visits["t_end"].shift(1)
    same = visits["_grp"].eq(visits["_grp"].shift(1))
    gap = (visits["t_start"] - prev_end).where(same, 0)
    by_day = visits.assign(_gap=gap).groupby("_grp", sort=False)
    bad_gap = by_day["_gap"].transform("max") > cfg.max_gap
    report.dropped_gap += int(visits.loc[bad_gap, "n_records"].sum())
    visits = visits[~bad_gap]

    day_size = visits.groupby("_grp", sort=False)["n_records"].transform("size")
    short = day_size < cfg.min_stays_per_day
    report.dropped_short_day += int(visits.loc[short, "n_records"].sum())
    visits = visits[~short]

    user_size = visits.groupby("user_id", sort=False)["n_records"].transform("size")
    few = user_size < cfg.min_stays_total
    report.dropped_user += int(visits.loc[few, "n_records"].sum())
    visits = visits[~few]
    report.kept += int(visits["n_records"].sum())

    trajs = []
    for uid, v in visits.groupby("user_id", sort=True):
        grp = v["_grp"].to_numpy()
        cuts = np.flatnonzero(np.diff(grp)) + 1
        bounds = np.concatenate([[0], cuts, [len(v)]])
        segs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        trajs.append(Trajectory(
            str(uid),
            v["zone_id"].to_numpy(dtype=object),
            v["t_start"].to_numpy(np.int64),
            v["t_end"].to_numpy(np.int64),
            v["lat"].to_numpy(float),
            v["lon"].to_numpy(float),
            segs,
            v["n_records"].to_numpy(np.int64),
            {c: v[c].to_numpy() for c in extra_cols},
        ))
    return trajs, report


def audit_trajectories(trajs: list[Trajectory], cfg: IngestConfig) -> list[str]:
    """Re-scan cleaned output; returns human-readable rule violations."""
    problems = []
    for t in trajs:
        if len(t) < cfg.min_stays_total:
            problems.append(f"{t.user_id}: {len(t)} visits < {cfg.min_stays_total}")
        if np.any(np.diff(t.t_start) < 0):
            problems.append(f"{t.user_id}: tokens out of order")
        covered = 0
        for a, b in t.segments:
            if a != covered:
                problems.append(f"{t.user_id}: segments do not tile tokens")
            covered = b
            if b - a < cfg.min_stays_per_day:
                problems.append(f"{t.user_id}: day segment with {b - a} visits")
            days = set(((t.t_start[a:b] + cfg.day_offset) // DAY).tolist())
            if len(days) != 1:
                problems.append(f"{t.user_id}: segment spans {len(days)} days")
            for k in range(a + 1, b):
                if t.t_start[k] - t.t_end[k - 1] > cfg.max_gap:
                    problems.append(f"{t.user_id}: gap {t.t_start[k] - t.t_end[k - 1]}s")
                d = 1000.0 * _hav_km(t.lat[k - 1], t.lon[k - 1], t.lat[k], t.lon[k])
                if d <= cfg.merge_radius:
                    problems.append(f"{t.user_id}: consecutive visits {d:.1f} m apart")
        if covered != len(t):
            problems.append(f"{t.user_id}: segments do not tile tokens")
    return problems


def _hav_km(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, a)))


# --- flow pruning -------------------------------------------------------------

def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def segment_transitions(zones: np.ndarray):
    """Consecutive distinct-zone transitions within one day segment."""
    for a, b in zip(zones[:-1], zones[1:]):
        if a != b:
            yield a, b


def undirected_flows(trajs: list[Trajectory]) -> Counter:
    flows: Counter = Counter()
    for t in trajs:
        for seg in t.segment_zones():
            for a, b in segment_transitions(seg):
                flows[pair_key(a, b)] += 1
    return flows


def nearest_rank(values, q: float):
    """Nearest-rank quantile: the ``ceil(q n)``-th smallest value (rank >= 1)."""
    v = np.sort(np.asarray(values))
    if len(v) == 0:
        raise IngestConfigError("quantile of empty flow set")
    rank = max(1, math.ceil(q * len(v)))
    return v[min(rank, len(v)) - 1]


def prune_flows(trajs: list[Trajectory], cfg: IngestConfig, report: IngestReport | None = None):
    """Remove day segments holding any transition outside the flow band,
    then users left with fewer than ``min_stays_total`` visits.

    Returns ``(trajectories, excluded_pairs)``; excluded pairs are unordered
    ``(a, b)`` tuples with ``a <= b``.
    """
    flows = undirected_flows(trajs)
    if len(flows) < 2:
        raise IngestConfigError(f"flow pruning needs >= 2 distinct pairs, corpus has {len(flows)}")
    counts = np.fromiter(flows.values(), dtype=np.int64)
    lo = nearest_rank(counts, cfg.flow_quantile_lo)
    hi = nearest_rank(counts, cfg.flow_quantile_hi)
    excluded = {p for p, c in flows.items() if c < lo or c > hi}
    log.info("flow band [%d, %d]: %d of %d pairs outside", lo, hi, len(excluded), len(flows))

    out = []
    dropped = 0
    for t in trajs:
        keep = [(a, b) for a, b in t.segments
                if not any(pair_key(x, y) in excluded for x, y in segment_transitions(t.zones[a:b]))]
        n_keep = sum(b - a for a, b in keep)
        # users left below the visit minimum go too, so the output stays a fixed point
        if n_keep < cfg.min_stays_total:
            keep = []
        dropped += int(t.n_records.sum()) - sum(int(t.n_records[a:b].sum()) for a, b in keep)
        if keep:
            out.append(t if len(keep) == len(t.segments) else t.subset(keep))
    if report is not None:
        report.pruned_flow += dropped
        report.kept -= dropped
    return out, excluded


# --- POI attribution -----------------------------------------------------------

def _unit_xyz(lat, lon):
    p, l = np.radians(lat), np.radians(lon)
    return np.column_stack([np.cos(p) * np.cos(l), np.cos(p) * np.sin(l), np.sin(p)])


def attribute_stays(lat, lon, pois: PoiTable, max_m: float = 100.0) -> np.ndarray:
    """Nearest POI within ``max_m`` meters of each stay, else ``None``.

    Ties in distance go to the lowest ``poi_id``.
    """
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    out = np.full(len(lat), None, dtype=object)
    if len(pois) == 0 or len(lat) == 0:
        return out
    tree = cKDTree(_unit_xyz(pois.lat, pois.lon))
    # chord length for the great-circle radius, padded against rounding
    chord = 2.0 * math.sin(max_m / 1000.0 / EARTH_RADIUS_KM / 2.0) * (1 + 1e-9) + 1e-12
    cands = tree.query_ball_point(_unit_xyz(lat, lon), chord)
    sizes = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
    if sizes.sum() == 0:
        return out
    row = np.repeat(np.arange(len(lat)), sizes)
    col = np.fromiter((i for c in cands for i in c), dtype=np.int64, count=int(sizes.sum()))
    d = haversine(lat[row], lon[row], pois.lat[col], pois.lon[col]) * 1000.0
    ok = d <= max_m
    row, col, d = row[ok], col[ok], d[ok]
    ids = pois.poi_id[col].astype(str)
    order = np.lexsort((ids, d, row))
    first = order[np.r_[True, row[order][1:] != row[order][:-1]]] if len(order) else order
    out[row[first]] = ids[first]
    return out


def attach_pois(trajs: list[Trajectory], pois: PoiTable, cfg: IngestConfig) -> None:
    """Store each visit's attributed POI id under ``extra['poi_id']``."""
    if not trajs:
        return
    lat = np.concatenate([t.lat for t in trajs])
    lon = np.concatenate([t.lon for t in trajs])
    ids = attribute_stays(lat, lon, pois, cfg.poi_attach_max)
    pos = 0
    for t in trajs:
        t.extra["poi_id"] = ids[pos:pos + len(t)]
        pos += len(t)


# --- persistence -----------------------------------------------------------------

def write_trajectories(trajs: list[Trajectory], path) -> None:
    """One row per visit with a per-user ``segment`` counter."""
    frames = []
    for t in trajs:
        df = t.to_frame()
        seg = np.empty(len(t), dtype=np.int64)
        for k, (a, b) in enumerate(t.segments):
            seg[a:b] = k
        df["segment"] = seg
        df["n_records"] = t.n_records
        frames.append(df)
    cols = ["user_id", "segment", "t_start", "t_end", "lat", "lon", "zone_id", "n_records"]
    out = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=cols)
    out = out[cols + [c for c in out.columns if c not in cols]]
    out.to_csv(path, index=False, float_format="%.7f")


def read_trajectories(path) -> list[Trajectory]:
    df = pd.read_csv(path, dtype={"user_id": str, "zone_id": str, "home_zone": str, "poi_id": str},
                     keep_default_na=False, na_values={"poi_id": [""], "home_zone": [""]})
    need = ["user_id", "segment", "t_start", "t_end", "lat", "lon", "zone_id", "n_records"]
    missing = [c for c in need if c not in df.columns]
    if missing:
        raise SchemaError(f"trajectory CSV missing columns {missing}; have {list(df.columns)}")
    extra_cols = [c for c in df.columns if c not in need]
    out = []
    for uid, v in df.groupby("user_id", sort=True):
        seg = v["segment"].to_numpy()
        cuts = np.flatnonzero(np.diff(seg)) + 1
        bounds = np.concatenate([[0], cuts, [len(v)]])
        extra = {}
        for c in extra_cols:
            col = v[c]
            extra[c] = col.to_numpy(dtype=object) if col.dtype == object else col.to_numpy()
        out.append(Trajectory(
            str(uid), v["zone_id"].to_numpy(dtype=object), v["t_start"].to_numpy(np.int64),
            v["t_end"].to_numpy(np.int64), v["lat"].to_numpy(float), v["lon"].to_numpy(float),
            [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])], v["n_records"].to_numpy(np.int64),
            extra,
        ))
    return out
