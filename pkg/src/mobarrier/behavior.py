"""Cross-barrier movement classification, per-user ratios and activity summaries."""

from __future__ import annotations

import logging
from collections import Counter

import numpy as np
import pandas as pd

from .ingest import pair_key

log = logging.getLogger(__name__)

MOVEMENT_COLUMNS = ["user_id", "origin_zone", "dest_zone", "depart_t", "arrive_t", "local_hour",
                    "dest_poi", "dest_category", "cross"]
CBR_COLUMNS = ["user_id", "home_zone", "n_cross", "n_within", "ratio"]


class BehaviorError(ValueError):
    pass


def classify_movements(trajs, soft_barriers, poi_category: dict | None = None) -> pd.DataFrame:
    """One row per consecutive distinct-zone pair inside a day segment.

    ``soft_barriers`` is a set of pairs (or anything with ``.pairs``);
    ``poi_category`` maps POI ids to categories. Local hours need a
    ``utc_offset`` column on every trajectory.
    """
    flagged = {pair_key(*p) for p in getattr(soft_barriers, "pairs", soft_barriers)}
    poi_category = poi_category or {}
    cols = {c: [] for c in MOVEMENT_COLUMNS}
    for t in trajs:
        if "utc_offset" not in t.extra:
            raise BehaviorError(f"user {t.user_id}: utc_offset column required for local hours")
        offset = np.asarray(t.extra["utc_offset"], dtype=np.int64)
        poi = t.extra.get("poi_id")
        for a, b in t.segments:
            z = t.zones[a:b]
            for k in np.flatnonzero(z[1:] != z[:-1]) + a + 1:
                o, d = t.zones[k - 1], t.zones[k]
                cols["user_id"].append(t.user_id)
                cols["origin_zone"].append(o)
                cols["dest_zone"].append(d)
                cols["depart_t"].append(int(t.t_end[k - 1]))
                cols["arrive_t"].append(int(t.t_start[k]))
                cols["local_hour"].append(int(((t.t_start[k] + offset[k]) % 86400) // 3600))
                p = poi[k] if poi is not None else None
                p = p if isinstance(p, str) else None
                cols["dest_poi"].append(p)
                cols["dest_category"].append(poi_category.get(p) if p is not None else None)
                cols["cross"].append(pair_key(o, d) in flagged)
    df = pd.DataFrame(cols, columns=MOVEMENT_COLUMNS)
    df["cross"] = df["cross"].astype(bool)
    return df


def home_zones(trajs) -> dict[str, str]:
    """Most frequent ``home_zone`` value per user; ties go to the smallest id."""
    out = {}
    for t in trajs:
        homes = t.extra.get("home_zone")
        if homes is None:
            continue
        c = Counter(h for h in homes.tolist() if isinstance(h, str))
        if c:
            out[t.user_id] = min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return out


def cbr(movements: pd.DataFrame, homes: dict[str, str]) -> pd.DataFrame:
    """Cross-barrier ratio ``n_cross / (n_cross + n_within)`` per user with movements."""
    if movements.empty:
        return pd.DataFrame(columns=CBR_COLUMNS)
    g = movements.groupby("user_id", sort=True)["cross"]
    n_cross = g.sum().astype(np.int64)
    n_all = g.size()
    df = pd.DataFrame({"user_id": n_all.index, "n_cross": n_cross.values, "n_within": (n_all - n_cross).values})
    df["home_zone"] = df["user_id"].map(homes)
    df["ratio"] = df["n_cross"] / (df["n_cross"] + df["n_within"])
    return df[CBR_COLUMNS]


def exploration_flags(movements: pd.DataFrame) -> pd.Series:
    """True where the user reaches a POI absent from their earlier movements.

    Movements without an attributed POI are NA. History follows arrival
    order within each user.
    """
    order = movements.sort_values(["user_id", "arrive_t"], kind="stable")
    known = order["dest_poi"].map(lambda p: isinstance(p, str))
    first = ~order.loc[known, ["user_id", "dest_poi"]].duplicated()
    out = pd.Series(pd.NA, index=movements.index, dtype="boolean")
    out.loc[first.index] = first.to_numpy()
    return out


def activity_summaries(movements: pd.DataFrame) -> dict[str, pd.DataFrame]:
    """Hourly histograms, category share differences and exploration rates.

    Returns frames keyed ``hourly``, ``category`` and ``exploration``.
    Movements with no category are left out of the category table; their
    count is in ``category.attrs['excluded']``.
    """
    cross = movements["cross"].to_numpy(bool)
    hours = movements["local_hour"].to_numpy(np.int64)
    hourly = pd.DataFrame({"hour": np.arange(24)})
    for name, m in (("cross", cross), ("within", ~cross)):
        h = np.bincount(hours[m], minlength=24)[:24]
        hourly[f"n_{name}"] = h
        hourly[f"share_{name}"] = h / h.sum() if h.sum() else np.nan

    has_cat = movements["dest_category"].map(lambda c: isinstance(c, str)).to_numpy(bool)
    cats = sorted(set(movements.loc[has_cat, "dest_category"]))
    rows = []
    n_c = int((has_cat & cross).sum())
    n_w = int((has_cat & ~cross).sum())
    cat_col = movements["dest_category"].to_numpy(object)
    for c in cats:
        is_c = has_cat & (cat_col == c)
        sc = (is_c & cross).sum() / n_c if n_c else np.nan
        sw = (is_c & ~cross).sum() / n_w if n_w else np.nan
        pct = 100.0 * (sc - sw) / sw if sw else np.nan
        rows.append((c, sc, sw, pct))
    category = pd.DataFrame(rows, columns=["category", "share_cross", "share_within", "pct_diff"])
    category.attrs["excluded"] = int((~has_cat).sum())
    if category.attrs["excluded"]:
        log.info("%d movements without category left out of category shares", category.attrs["excluded"])

    flags = exploration_flags(movements)
    ok = flags.notna().to_numpy()
    fl = flags.fillna(False).to_numpy(bool)
    exp_rows = []
    for name, m in (("cross", cross), ("within", ~cross)):
        n = int((ok & m).sum())
        exp_rows.append((name, int((fl & m).sum()), n, (fl & m).sum() / n if n else np.nan))
    exploration = pd.DataFrame(exp_rows, columns=["kind", "n_explore", "n", "rate"])
    return {"hourly": hourly, "category": category, "exploration": exploration}
