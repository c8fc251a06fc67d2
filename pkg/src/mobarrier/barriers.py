"""Residual model of embedding vs. physical distance and barrier flagging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .features import distance_bin
from .gravity import FitError, ols

log = logging.getLogger(__name__)

MODES = ("main", "soft")
BARRIER_COLUMNS = ["zone_i", "zone_j", "d_phys_km", "d_embed", "residual", "bin", "rank", "mode"]


@dataclass
class ResidualModel:
    pairs: list
    d_phys: np.ndarray
    d_embed: np.ndarray
    intercept: float
    beta: float
    residuals: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return self.intercept + self.beta * np.log(self.d_phys)


@dataclass
class BarrierSet:
    mode: str
    table: pd.DataFrame
    bin_sizes: dict = field(default_factory=dict)
    skipped_bins: list = field(default_factory=list)
    dropped_missing: int = 0

    @property
    def pairs(self) -> set:
        return set(zip(self.table["zone_i"], self.table["zone_j"]))

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, float_format="%.10g")


def fit_residual_model(pairs, d_phys, d_embed) -> ResidualModel:
    """OLS of embedding distance on natural-log physical distance, with intercept."""
    d_phys = np.asarray(d_phys, dtype=float)
    d_embed = np.asarray(d_embed, dtype=float)
    if len(pairs) != len(d_phys) or len(d_phys) != len(d_embed):
        raise FitError("pairs and distance arrays differ in length")
    if (d_phys <= 0).any():
        raise FitError("physical distances must be positive")
    intercept, beta, _, resid = ols(np.log(d_phys), d_embed)
    return ResidualModel([tuple(p) for p in pairs], d_phys, d_embed, intercept, beta, resid)


def _select(model: ResidualModel, keep: np.ndarray, refit: bool) -> ResidualModel:
    idx = np.flatnonzero(keep)
    pairs = [model.pairs[k] for k in idx]
    if refit:
        return fit_residual_model(pairs, model.d_phys[idx], model.d_embed[idx])
    return ResidualModel(pairs, model.d_phys[idx], model.d_embed[idx], model.intercept, model.beta,
                         model.residuals[idx])


def detect_barriers(model: ResidualModel, excluded=(), q: float = 0.05, flow_filter: str = "all",
                    nonzero_pairs=None) -> BarrierSet:
    """Flag the top ``ceil(q * n_bin)`` residuals within each 1 km bin.

    Excluded pairs are dropped before ranking. With ``flow_filter =
    'nonzero_flow'`` the model is refit on the pairs in ``nonzero_pairs``
    (minus exclusions) and residuals recomputed before ranking.
    Ties are broken by the lexicographic pair id.
    """
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    mode = "main" if flow_filter == "all" else "soft"
    if flow_filter not in ("all", "nonzero_flow"):
        raise ValueError(f"unknown flow_filter {flow_filter!r}")
    excluded = {tuple(sorted(p)) for p in excluded}
    keep = np.array([tuple(sorted(p)) not in excluded for p in model.pairs], dtype=bool)
    if flow_filter == "nonzero_flow":
        if nonzero_pairs is None:
            raise ValueError("soft mode needs the set of nonzero-flow pairs")
        nz = {tuple(sorted(p)) for p in nonzero_pairs}
        keep &= np.array([tuple(sorted(p)) in nz for p in model.pairs], dtype=bool)
    if flow_filter == "nonzero_flow" or not keep.all():
        model = _select(model, keep, refit=flow_filter == "nonzero_flow")

    bins = distance_bin(model.d_phys)
    zi = np.array([p[0] for p in model.pairs], dtype=str)
    zj = np.array([p[1] for p in model.pairs], dtype=str)
    # primary key residual descending, then zone_i, zone_j ascending
    order = np.lexsort((zj, zi, -model.residuals, bins))
    rows, sizes = [], {}
    sorted_bins = bins[order]
    starts = np.flatnonzero(np.r_[True, sorted_bins[1:] != sorted_bins[:-1]])
    ends = np.r_[starts[1:], len(order)]
    for s, e in zip(starts, ends):
        b = int(sorted_bins[s])
        n = int(e - s)
        sizes[b] = n
        k = math.ceil(round(q * n, 9))  # guard against 0.05 * 60 = 3.0000000000000004
        for rank, idx in enumerate(order[s:s + k], start=1):
            rows.append((zi[idx], zj[idx], model.d_phys[idx], model.d_embed[idx], model.residuals[idx],
                         b, rank, mode))
    skipped = [] if not sizes else [b for b in range(1, max(sizes) + 1) if b not in sizes]
    if skipped:
        log.info("empty distance bins skipped: %s", skipped)
    table = pd.DataFrame(rows, columns=BARRIER_COLUMNS)
    return BarrierSet(mode, table, sizes, skipped)


def residual_table(pairs, d_phys, d_embed):
    """Drop pairs with a missing embedding distance; returns the kept arrays and the drop count."""
    d_embed = np.asarray(d_embed, dtype=float)
    ok = np.isfinite(d_embed)
    kept = [p for p, k in zip(pairs, ok) if k]
    return kept, np.asarray(d_phys, dtype=float)[ok], d_embed[ok], int((~ok).sum())
