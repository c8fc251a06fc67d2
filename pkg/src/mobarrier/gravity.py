"""Flow aggregation and normalized-flux gravity fits."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import pair_key, segment_transitions

KINDS = ("log_geo", "embed_cosine")


class FitError(ValueError):
    pass


@dataclass
class FlowMatrix:
    """Directed transition counts and unique-user zone masses."""

    counts: Counter
    masses: dict

    def symmetric(self) -> Counter:
        out: Counter = Counter()
        for (a, b), c in self.counts.items():
            out[pair_key(a, b)] += c
        return out

    def to_csv(self, path) -> None:
        rows = sorted(self.counts.items())
        pd.DataFrame({"zone_i": [a for (a, _), _ in rows], "zone_j": [b for (_, b), _ in rows],
                      "count": [c for _, c in rows]}).to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path, masses: dict) -> "FlowMatrix":
        df = pd.read_csv(path, dtype={"zone_i": str, "zone_j": str})
        return cls(Counter({(a, b): int(c) for a, b, c in zip(df.zone_i, df.zone_j, df["count"])}), dict(masses))


@dataclass
class GravityFit:
    kind: str
    intercept: float
    slope: float
    r2: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_flows(trajs) -> FlowMatrix:
    """Count distinct-zone transitions within day segments and unique users per zone."""
    counts: Counter = Counter()
    users: dict[str, set] = {}
    for t in trajs:
        for seg in t.segment_zones():
            counts.update(segment_transitions(seg))
        for z in set(t.zones.tolist()):
            users.setdefault(z, set()).add(t.user_id)
    return FlowMatrix(counts, {z: len(u) for z, u in users.items()})


def normalized_flux(flows: FlowMatrix, pairs) -> np.ndarray:
    """``log10((T_ij + T_ji) / (m_i m_j))``; NaN where the pair carries no flow."""
    sym = flows.symmetric()
    out = np.full(len(pairs), np.nan)
    for k, (a, b) in enumerate(pairs):
        t = sym.get(pair_key(a, b), 0)
        if t > 0:
            out[k] = np.log10(t / (flows.masses[a] * flows.masses[b]))
    return out


def ols(x, y) -> tuple[float, float, float, np.ndarray]:
    """Simple regression with intercept: ``(intercept, slope, r2, residuals)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise FitError(f"need at least 3 points, got {len(x)}")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 0 or not np.isfinite(sxx):
        raise FitError("predictor has zero variance")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - intercept - slope * x
    yc = y - y.mean()
    sst = float(yc @ yc)
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else float("nan")
    return intercept, slope, r2, resid


def fit_normalized_flux(flows: FlowMatrix, pairs, distances, kind: str) -> GravityFit:
    """Regress normalized flux on distance over the nonzero-flow pairs.

    For ``log_geo`` the predictor is ``log10`` of the physical distance; for
    ``embed_cosine`` it is the cosine distance itself.
    """
    if kind not in KINDS:
        raise FitError(f"unknown predictor kind {kind!r}")
    y = normalized_flux(flows, pairs)
    d = np.asarray(distances, dtype=float)
    ok = np.isfinite(y) & np.isfinite(d)
    if kind == "log_geo":
        ok &= d > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.log10(d)
    else:
        x = d
    intercept, slope, r2, _ = ols(x[ok], y[ok])
    return GravityFit(kind, intercept, slope, r2, int(ok.sum()))


def r2_gap(fit_a: GravityFit, fit_b: GravityFit) -> float:
    if fit_a.n != fit_b.n:
        raise FitError(f"fits use different pair sets (n={fit_a.n} vs {fit_b.n})")
    return fit_a.r2 - fit_b.r2


def write_fits(fits, path) -> None:
    Path(path).write_text(json.dumps([f.to_dict() for f in fits], indent=2))
