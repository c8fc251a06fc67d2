"""Synthetic cities with gravity-law mobility and planted barriers.

Zones are square cells on a grid. Flows follow
``T_ij = C m_i m_j d_ij^-gamma`` with the weight of every planted pair
multiplied by ``suppression``. Planted pairs are those with exactly one
zone inside an enclosed district whose boundary is emitted as a physical
barrier layer. Users perform a reversible random walk on the flow matrix,
so expected transition counts are proportional to the planted flows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
import pandas as pd

from .features import CATEGORIES
from .geo import EARTH_RADIUS_KM, BarrierGeometry, BarrierLayer, ZoneMap, haversine

MAX_PAIR_KM = 20.0
DAY = 86400
T0 = 1569888000  # 2019-10-01T00:00:00Z


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_zones: int = 400
    spacing_km: float = 1.0
    origin_lat: float = 42.30
    origin_lon: float = -71.10
    gravity_exponent: float = 1.8
    barrier_fraction: float = 0.02
    suppression: float = 0.1
    district_size: int = 2
    users: int = 2000
    tokens_per_user: int = 1000
    stays_per_day: int = 10
    poi_density: float = 0.6  # POIs per km^2 per category
    mass_sigma: float = 0.5
    county_tiles: int = 2
    race_groups: int = 4
    decoy_barriers: int = 4
    utc_offset: int = -4 * 3600
    seed: int = 7

    def __post_init__(self):
        side = math.isqrt(self.n_zones)
        if side * side != self.n_zones or side < 2:
            raise SynthError("n_zones must be a square number >= 4")
        if not 0 <= self.suppression < 1:
            raise SynthError("suppression must lie in [0, 1)")
        if self.spacing_km <= 0 or self.users < 1 or self.tokens_per_user < 2:
            raise SynthError("spacing, users and tokens_per_user must be positive")
        if self.barrier_fraction < 0 or self.gravity_exponent < 0:
            raise SynthError("barrier_fraction and gravity_exponent must be nonnegative")
        if self.stays_per_day < 2:
            raise SynthError("stays_per_day must be >= 2")

    @property
    def side(self) -> int:
        return math.isqrt(self.n_zones)


@dataclass
class PlantedTruth:
    zone_ids: list[str]
    masses: np.ndarray
    flow: np.ndarray  # planted T_ij, C = 1
    planted: set = field(default_factory=set)
    districts: list = field(default_factory=list)
    cbr_betas: dict = field(default_factory=dict)

    def planted_pairs(self) -> set[tuple[str, str]]:
        return set(self.planted)

    def to_json(self) -> dict:
        return {
            "zone_ids": self.zone_ids,
            "masses": self.masses.tolist(),
            "planted": sorted([list(p) for p in self.planted]),
            "districts": self.districts,
            "cbr_betas": self.cbr_betas,
        }


@dataclass
class City:
    cfg: SynthConfig
    zones: ZoneMap
    pois: list[tuple[str, float, float, str]]
    demographics: list[dict]
    layers: dict[str, BarrierLayer]
    truth: PlantedTruth
    zone_xy: np.ndarray


def _cell_id(r: int, c: int) -> str:
    return f"Z{r:03d}{c:03d}"


def _to_lonlat(cfg: SynthConfig, x_km, y_km):
    lat = cfg.origin_lat + np.degrees(np.asarray(y_km) / EARTH_RADIUS_KM)
    lon = cfg.origin_lon + np.degrees(np.asarray(x_km) / (EARTH_RADIUS_KM * math.cos(math.radians(cfg.origin_lat))))
    return lon, lat


def _smooth_field(rng, side, scale=4.0):
    """Low-frequency random field on the grid, roughly unit variance."""
    r, c = np.mgrid[0:side, 0:side]
    f = np.zeros((side, side))
    for _ in range(6):
        kx, ky = rng.normal(0, 1 / scale, 2)
        ph = rng.uniform(0, 2 * np.pi)
        f += np.cos(2 * np.pi * (kx * c + ky * r) / 2 + ph)
    return (f - f.mean()) / (f.std() + 1e-12)


def flow_weights(xy: np.ndarray, masses: np.ndarray, gamma: float, planted_mask: np.ndarray,
                 suppression: float, dist_km: np.ndarray | None = None) -> np.ndarray:
    """Planted gravity flows with zero diagonal."""
    if dist_km is None:
        dist_km = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    with np.errstate(divide="ignore"):
        w = np.outer(masses, masses) * np.where(dist_km > 0, dist_km, np.inf) ** (-gamma)
    w[planted_mask] *= suppression
    np.fill_diagonal(w, 0.0)
    return w


def _place_districts(cfg: SynthConfig, rng, dist: np.ndarray, ids: list[str]):
    side, k = cfg.side, cfg.district_size
    near = (dist <= MAX_PAIR_KM) & ~np.eye(len(ids), dtype=bool)
    n_near = near.sum() / 2
    inside = np.zeros(len(ids), dtype=bool)
    districts = []
    candidates = [(r, c) for r in range(1, side - k) for c in range(1, side - k)]
    rng.shuffle(candidates)
    best_frac = 0.0
    for r0, c0 in candidates:
        if cfg.barrier_fraction == 0:
            break
        cells = [(r, c) for r in range(r0, r0 + k) for c in range(c0, c0 + k)]
        # keep a one-cell moat between districts
        if any(inside[(r + dr) * side + (c + dc)]
               for r, c in cells for dr in (-1, 0, 1) for dc in (-1, 0, 1)
               if 0 <= r + dr < side and 0 <= c + dc < side):
            continue
        trial = inside.copy()
        for r, c in cells:
            trial[r * side + c] = True
        frac = (near & (trial[:, None] != trial[None, :])).sum() / 2 / n_near
        if districts and abs(frac - cfg.barrier_fraction) >= abs(best_frac - cfg.barrier_fraction):
            break
        inside, best_frac = trial, frac
        districts.append([r0, c0, k])
    planted_mask = near & (inside[:, None] != inside[None, :])
    return districts, inside, planted_mask


def generate_city(cfg: SynthConfig) -> City:
    """Zones, POIs, demographics, barrier layers and planted truth."""
    rng = np.random.default_rng([cfg.seed, 0])
    side, sp = cfg.side, cfg.spacing_km
    ids, parts, county, xy = [], {}, {}, []
    tile = max(1, math.ceil(side / cfg.county_tiles))
    for r in range(side):
        for c in range(side):
            z = _cell_id(r, c)
            ids.append(z)
            xs = np.array([c, c + 1, c + 1, c]) * sp
            ys = np.array([r, r, r + 1, r + 1]) * sp
            lon, lat = _to_lonlat(cfg, xs, ys)
            parts[z] = [[np.column_stack([lon, lat])]]
            county[z] = f"C{r // tile}{c // tile}"
            xy.append(((c + 0.5) * sp, (r + 0.5) * sp))
    zones = ZoneMap(ids, parts, county)
    xy = np.array(xy)
    dist = haversine(zones.centroid_lat[:, None], zones.centroid_lon[:, None],
                     zones.centroid_lat[None, :], zones.centroid_lon[None, :])

    masses = np.exp(rng.normal(0.0, cfg.mass_sigma, len(ids)))
    districts, inside, planted_mask = _place_districts(cfg, rng, dist, ids)
    flow = flow_weights(xy, masses, cfg.gravity_exponent, planted_mask, cfg.suppression, dist)
    ia, ib = np.nonzero(np.triu(planted_mask, 1))
    planted = {(ids[a], ids[b]) if ids[a] <= ids[b] else (ids[b], ids[a]) for a, b in zip(ia, ib)}

    layers = _barrier_layers(cfg, rng, districts)
    pois = _pois(cfg, rng, ids)
    demo = _demographics(cfg, rng, ids, county, inside)
    truth = PlantedTruth(ids, masses, flow, planted, districts, dict(CBR_BETAS))
    return City(cfg, zones, pois, demo, layers, truth, xy)


def _barrier_layers(cfg, rng, districts) -> dict[str, BarrierLayer]:
    kinds = ["highway", "railway", "waterway"]
    geoms: dict[str, list] = {k: [] for k in ("highway", "railway", "park", "waterway")}
    sp = cfg.spacing_km
    for n, (r0, c0, k) in enumerate(districts):
        # ring drawn just inside the district so centroid segments of inner pairs stay clear
        x0, x1 = (c0 + 0.02) * sp, (c0 + k - 0.02) * sp
        y0, y1 = (r0 + 0.02) * sp, (r0 + k - 0.02) * sp
        lon, lat = _to_lonlat(cfg, [x0, x1, x1, x0, x0], [y0, y0, y1, y1, y0])
        kind = kinds[n % len(kinds)]
        geoms[kind].append(BarrierGeometry(kind, False, [np.column_stack([lon, lat])]))
    side = cfg.side * sp
    for n in range(cfg.decoy_barriers):
        kind = ("park", "highway", "railway", "waterway")[n % 4]
        if kind == "park":
            cx, cy = rng.uniform(0.1 * side, 0.9 * side, 2)
            w, h = rng.uniform(0.3, 0.8, 2) * sp
            lon, lat = _to_lonlat(cfg, [cx - w, cx + w, cx + w, cx - w], [cy - h, cy - h, cy + h, cy + h])
            geoms[kind].append(BarrierGeometry(kind, True, [np.column_stack([lon, lat])]))
        else:
            x = np.sort(rng.uniform(0, side, 2))
            y = rng.uniform(0, side, 2)
            lon, lat = _to_lonlat(cfg, x, y)
            geoms[kind].append(BarrierGeometry(kind, False, [np.column_stack([lon, lat])]))
    return {k: BarrierLayer(k, g) for k, g in geoms.items() if g}


def _pois(cfg, rng, ids) -> list[tuple[str, float, float, str]]:
    sp, side = cfg.spacing_km, cfg.side
    margin = 0.15 * sp
    out = []
    pid = 0
    # category-specific spatial tilts so POI composition varies across zones
    tilt = rng.normal(0, 0.6, (len(CATEGORIES), 2))
    for k, z in enumerate(ids):
        r, c = divmod(k, side)
        for j, cat in enumerate(CATEGORIES):
            lam = cfg.poi_density * sp * sp * math.exp(tilt[j, 0] * (c / side - 0.5) + tilt[j, 1] * (r / side - 0.5))
            for _ in range(rng.poisson(lam)):
                x = c * sp + rng.uniform(margin, sp - margin)
                y = r * sp + rng.uniform(margin, sp - margin)
                lon, lat = _to_lonlat(cfg, x, y)
                out.append((f"P{pid:06d}", float(lat), float(lon), cat))
                pid += 1
    return out


def _demographics(cfg, rng, ids, county, inside) -> list[dict]:
    side, g = cfg.side, cfg.race_groups
    fields = [_smooth_field(rng, side).ravel() for _ in range(g + 5)]
    rows = []
    for k, z in enumerate(ids):
        logits = np.array([fields[j][k] for j in range(g)]) * 1.2
        if inside[k]:
            logits[0] += 1.5
        race = np.exp(logits - logits.max())
        race = race / race.sum()
        rows.append({
            "zone_id": z,
            **{f"race_cat_{j + 1}": float(race[j]) for j in range(g)},
            "median_housing_value": float(round(300000 * math.exp(0.4 * fields[g][k]), 2)),
            "transit_share": float(1 / (1 + math.exp(-(fields[g + 1][k] - 1.0)))),
            "employed_ratio": float(1 / (1 + math.exp(-(fields[g + 2][k] + 1.0)))),
            "poverty_ratio": float(1 / (1 + math.exp(-(fields[g + 3][k] - 1.5)))),
            "racial_diversity": float(-(race * np.log(race)).sum()),
            "population": float(round(800 * math.exp(0.3 * fields[g + 4][k]))),
            "county_id": county[z],
        })
    return rows


# --- trajectories ------------------------------------------------------------------

@numba.njit(cache=True)
def _walk(cum, start, u):
    n = u.shape[0]
    path = np.empty(n, dtype=np.int64)
    cur = start
    for t in range(n):
        path[t] = cur
        row = cum[cur]
        nxt = np.searchsorted(row, u[t] * row[-1], side="right")
        if nxt >= row.shape[0]:
            nxt = row.shape[0] - 1
        cur = nxt
    return path


def transition_matrix(flow: np.ndarray) -> np.ndarray:
    return flow / flow.sum(axis=1, keepdims=True)


def generate_trajectories(city: City, stays_path=None) -> pd.DataFrame:
    """Random-walk stays for every user; optionally written as a stays CSV.

    Each user starts from the walk's stationary law (proportional to flow row
    sums), so expected pair transition counts are proportional to the
    planted flow matrix. Columns: ``user_id, t_start, t_end, lat, lon,
    zone_id, home_zone, utc_offset``. Every user draws from its own
    ``(seed, user)`` stream.
    """
    cfg = city.cfg
    flow = city.truth.flow
    cum = np.cumsum(flow, axis=1)
    stat_cum = np.cumsum(flow.sum(axis=1) / flow.sum())
    ids = np.array(city.zones.ids, dtype=object)
    n_z = len(ids)

    # POI coordinates grouped by zone; zones without POIs fall back to the centroid
    plat = np.array([p[1] for p in city.pois])
    plon = np.array([p[2] for p in city.pois])
    pz = city.zones.assign(plat, plon)
    pzi = np.array([city.zones.index[z] if z is not None else -1 for z in pz], dtype=np.int64)
    order = np.argsort(pzi, kind="stable")
    order = order[pzi[order] >= 0]
    spot_lat = np.concatenate([plat[order], city.zones.centroid_lat])
    spot_lon = np.concatenate([plon[order], city.zones.centroid_lon])
    cnt = np.bincount(pzi[order], minlength=n_z)
    off = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    empty = cnt == 0
    off[empty] = len(order) + np.flatnonzero(empty)
    cnt[empty] = 1

    n_tok, per_day = cfg.tokens_per_user, cfg.stays_per_day
    day = np.arange(n_tok) // per_day
    first = np.arange(n_tok) % per_day == 0
    cols = {k: [] for k in ("user_id", "t_start", "t_end", "lat", "lon", "zone_id", "home_zone")}
    for u in range(cfg.users):
        rng = np.random.default_rng([cfg.seed, 1, u])
        start = min(int(np.searchsorted(stat_cum, rng.uniform(), side="right")), n_z - 1)
        path = _walk(cum, start, rng.uniform(size=n_tok))
        spot = off[path] + (rng.uniform(size=n_tok) * cnt[path]).astype(np.int64)
        # a few meters of jitter around the venue
        lat = spot_lat[spot] + rng.normal(0, 1e-5, n_tok)
        lon = spot_lon[spot] + rng.normal(0, 1e-5, n_tok)
        dur = rng.integers(15 * 60, 45 * 60, n_tok)
        gap = rng.integers(5 * 60, 30 * 60, n_tok)
        day_start = T0 + day * DAY + 6 * 3600 + np.repeat(rng.integers(0, 1800, -(-n_tok // per_day)), per_day)[:n_tok]
        step = dur + gap
        within = np.cumsum(step) - step
        within -= np.maximum.accumulate(np.where(first, within, 0))
        t0 = day_start + within
        cols["user_id"].append(np.full(n_tok, f"U{u:05d}", dtype=object))
        cols["t_start"].append(t0)
        cols["t_end"].append(t0 + dur)
        cols["lat"].append(lat)
        cols["lon"].append(lon)
        cols["zone_id"].append(ids[path])
        cols["home_zone"].append(np.full(n_tok, ids[start], dtype=object))
    df = pd.DataFrame({k: np.concatenate(v) if v else np.array([]) for k, v in cols.items()})
    df["utc_offset"] = cfg.utc_offset
    if stays_path is not None:
        df.to_csv(stays_path, index=False, float_format="%.7f")
    return df


# --- recovery ----------------------------------------------------------------------

def evaluate_recovery(flagged, truth: PlantedTruth, eligible=None) -> dict:
    """Precision and recall of flagged pairs against the planted set.

    ``eligible`` (optional) restricts both sets to pairs that could have been
    flagged at all (within range, in vocabulary, not pruned).
    """
    planted = {tuple(sorted(p)) for p in truth.planted}
    if not planted:
        raise SynthError("planted truth is empty")
    flags = {tuple(sorted(p)) for p in flagged}
    if eligible is not None:
        elig = {tuple(sorted(p)) for p in eligible}
        planted &= elig
        flags &= elig
        if not planted:
            raise SynthError("no planted pair is eligible for flagging")
    hit = len(flags & planted)
    return {
        "precision": hit / len(flags) if flags else 0.0,
        "recall": hit / len(planted),
        "n_flagged": len(flags),
        "n_planted": len(planted),
        "n_hit": hit,
    }


# --- cross-barrier-ratio users ------------------------------------------------------

CBR_REGRESSORS = ("employed_ratio", "transit_share", "racial_diversity", "poverty_ratio", "population")
CBR_BETAS = dict(zip(CBR_REGRESSORS, (0.3, -0.15, 0.14, 0.25, -0.1)))


def generate_cbr_users(n_users: int, n_groups: int, betas: dict | None = None, noise: float = 1.0,
                       seed: int = 0):
    """Users with standardized regressors, a group effect and a linear outcome.

    Returns ``(X, y, groups, betas)``; ``X`` columns follow ``CBR_REGRESSORS``.
    """
    betas = dict(CBR_BETAS if betas is None else betas)
    rng = np.random.default_rng([seed, 2])
    groups = rng.integers(0, n_groups, n_users)
    effects = rng.normal(0, 1, n_groups)
    # regressors correlated with the group effect, as residential metros differ
    X = rng.normal(0, 1, (n_users, len(CBR_REGRESSORS))) + 0.5 * effects[groups, None]
    b = np.array([betas[k] for k in CBR_REGRESSORS])
    y = X @ b + effects[groups] + rng.normal(0, noise, n_users)
    return X, y, groups, betas


# --- file emission ------------------------------------------------------------------

def write_city(city: City, outdir) -> dict:
    """Write every pipeline input file plus truth; returns the manifest."""
    from .geo import barrier_layers_to_geojson

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    city.zones.to_geojson(out / "zones.geojson")
    with open(out / "pois.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["poi_id", "lat", "lon", "category"])
        for pid, la, lo, cat in city.pois:
            w.writerow([pid, f"{la:.7f}", f"{lo:.7f}", cat])
    cols = list(city.demographics[0].keys())
    with open(out / "demographics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in city.demographics:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    barrier_layers_to_geojson(city.layers, out / "barriers.geojson")
    generate_trajectories(city, out / "stays.csv")
    (out / "truth.json").write_text(json.dumps(city.truth.to_json(), indent=1))
    manifest = {
        "schema_version": 1,
        "config": asdict(city.cfg),
        "files": {
            "zones": "zones.geojson",
            "pois": "pois.csv",
            "demographics": "demographics.csv",
            "barriers": "barriers.geojson",
            "stays": "stays.csv",
            "truth": "truth.json",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_truth(path) -> PlantedTruth:
    doc = json.loads(Path(path).read_text())
    return PlantedTruth(
        doc["zone_ids"], np.asarray(doc["masses"]), np.zeros((0, 0)),
        {tuple(p) for p in doc["planted"]}, doc.get("districts", []), doc.get("cbr_betas", {}),
    )
