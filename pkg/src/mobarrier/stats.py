"""Balanced sampling, per-bin standardization, IRLS logistic regression,
likelihood-ratio ablation and fixed-effects linear regression."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats as sps

from .features import CATEGORIES, CATEGORY_COLUMNS, CROSSING_COLUMNS, EXCLUDED_CATEGORY

log = logging.getLogger(__name__)

CONST = "const"
GROUPS = {
    "POI": ["poi_interv", "poi_js"],
    "Phy": list(CROSSING_COLUMNS.values()),
    "Demo": ["race_dist_js", "income_diff", "transit_diff"],
    "County": ["cross_county"],
}
DISAGGREGATED_POI = [CATEGORY_COLUMNS[c] for c in CATEGORIES if c != EXCLUDED_CATEGORY]
LOG_COLUMNS = set(["poi_interv", *CROSSING_COLUMNS.values(), *DISAGGREGATED_POI])
SEPARATION_NORM = 1e3
RIDGE = 1e-6


class StatsError(ValueError):
    pass


def feature_groups(disaggregate_poi: bool = False) -> dict[str, list[str]]:
    g = {k: list(v) for k, v in GROUPS.items()}
    if disaggregate_poi:
        g["POI"] = DISAGGREGATED_POI + ["poi_js"]
    return g


# --- sampling and standardization -----------------------------------------------------

def balanced_sample(features: pd.DataFrame, flagged, seed: int = 0, bin_col: str = "bin_index") -> pd.DataFrame:
    """Label flagged pairs 1 and draw as many unflagged pairs per bin, labeled 0.

    ``flagged`` is a set of ``(zone_i, zone_j)`` or a barrier set exposing
    ``.pairs``. Each bin uses its own ``(seed, bin)`` random stream.
    """
    flagged = getattr(flagged, "pairs", flagged)
    flagged = {tuple(sorted(p)) for p in flagged}
    key = list(zip(features["zone_i"], features["zone_j"]))
    is_pos = np.array([tuple(sorted(k)) in flagged for k in key], dtype=bool)
    bins = features[bin_col].to_numpy()
    parts = []
    for b in np.unique(bins):
        in_bin = bins == b
        pos = np.flatnonzero(in_bin & is_pos)
        neg = np.flatnonzero(in_bin & ~is_pos)
        if len(pos) == 0:
            continue
        if len(pos) > len(neg):
            log.warning("bin %s: %d positives but only %d negatives; using all negatives", b, len(pos), len(neg))
            draw = neg
        else:
            rng = np.random.default_rng([seed, int(b)])
            draw = np.sort(rng.choice(neg, size=len(pos), replace=False))
        sel = np.concatenate([pos, draw])
        part = features.iloc[sel].copy()
        part["label"] = np.r_[np.ones(len(pos), dtype=np.int64), np.zeros(len(draw), dtype=np.int64)]
        parts.append(part)
    if not parts:
        return features.iloc[:0].assign(label=pd.Series(dtype=np.int64))
    return pd.concat(parts, ignore_index=True)


@dataclass
class DesignMatrix:
    """Standardized regressors with a leading constant column."""

    X: np.ndarray
    y: np.ndarray
    columns: list[str]
    groups: dict[str, str]  # column -> group tag
    bins: np.ndarray
    degenerate: dict = field(default_factory=dict)  # bin -> list of zeroed columns

    def for_bin(self, b) -> "DesignMatrix":
        m = self.bins == b
        return DesignMatrix(self.X[m], self.y[m], list(self.columns), dict(self.groups), self.bins[m],
                            {b: self.degenerate.get(b, [])})

    def drop_group(self, group: str) -> "DesignMatrix":
        keep = [k for k, c in enumerate(self.columns) if self.groups.get(c) != group]
        cols = [self.columns[k] for k in keep]
        return DesignMatrix(self.X[:, keep], self.y, cols, {c: g for c, g in self.groups.items() if c in cols},
                            self.bins, self.degenerate)


def zscore(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Population z-score; a constant column becomes zeros and is reported degenerate."""
    x = np.asarray(x, dtype=float)
    sd = x.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))):
        return np.zeros_like(x), True
    return (x - x.mean()) / sd, False


def standardize(rows: pd.DataFrame, groups: dict[str, list[str]] | None = None, label_col: str = "label",
                bin_col: str = "bin_index") -> DesignMatrix:
    """Per-bin z-scores after ``log1p`` on the heavy-tailed count columns."""
    groups = groups if groups is not None else feature_groups()
    cols = [c for g in groups.values() for c in g]
    tags = {c: g for g, cs in groups.items() for c in cs}
    bins = rows[bin_col].to_numpy()
    raw = np.column_stack([
        np.log1p(rows[c].to_numpy(float)) if c in LOG_COLUMNS else rows[c].to_numpy(float) for c in cols
    ]) if cols else np.zeros((len(rows), 0))
    Z = np.zeros_like(raw)
    degenerate = {}
    for b in np.unique(bins):
        m = bins == b
        bad = []
        for k, c in enumerate(cols):
            Z[m, k], flag = zscore(raw[m, k])
            if flag:
                bad.append(c)
        degenerate[b.item() if hasattr(b, "item") else b] = bad
    y = rows[label_col].to_numpy(float) if label_col in rows else np.full(len(rows), np.nan)
    X = np.column_stack([np.ones(len(rows)), Z])
    return DesignMatrix(X, y, [CONST, *cols], tags, bins, degenerate)


# --- logistic regression ---------------------------------------------------------------

def log_likelihood(beta, X, y) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def score(beta, X, y) -> np.ndarray:
    return X.T @ (y - sps.logistic.cdf(X @ beta))


@dataclass
class LogisticFit:
    columns: list[str]
    coef: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    loglik: float
    converged: bool
    n: int
    iterations: int
    penalized: bool = False
    history: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)

    def odds_ratio(self, column: str) -> float:
        """Odds multiplier for a one-unit (one-sd) increase in ``column``."""
        return math.exp(self.coef[self.columns.index(column)])

    def table(self, bin_label=None) -> pd.DataFrame:
        return pd.DataFrame({
            "bin": bin_label, "variable": self.columns,
            "group": [self.groups.get(c, "const" if c == CONST else "") for c in self.columns],
            "estimate": self.coef, "se": self.se, "p": self.pvalues, "converged": self.converged,
        })


def _irls(X, y, active, ridge, max_iter, tol):
    p = X.shape[1]
    beta = np.zeros(p)
    pen = np.full(p, ridge)
    pen[0] = 0.0  # intercept unpenalized
    Xa = X[:, active]
    pa = pen[active]

    def objective(b):
        return log_likelihood(b, X, y) - 0.5 * float(np.sum(pen * b * b))

    def gradient(b):
        mu = sps.logistic.cdf(X @ b)
        return Xa.T @ (y - mu) - pa * b[active], mu

    ll = objective(beta)
    history = [ll]
    it = 0
    while it < max_iter:
        g, mu = gradient(beta)
        if np.max(np.abs(g), initial=0.0) < tol:
            break
        it += 1
        w = mu * (1 - mu)
        H = Xa.T @ (Xa * w[:, None]) + np.diag(pa)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        # step halving keeps the objective non-decreasing
        t = 1.0
        while True:
            trial = beta.copy()
            trial[active] += t * step
            new = objective(trial)
            if new >= ll or t < 1e-10:
                break
            t *= 0.5
        if new < ll:
            break  # no ascent left at machine precision
        beta, ll = trial, new
        history.append(ll)
        if np.linalg.norm(beta) > SEPARATION_NORM:
            break
    converged = bool(np.max(np.abs(gradient(beta)[0]), initial=0.0) < tol)
    return beta, history, converged, it


def fit_logistic(design: DesignMatrix, max_iter: int = 100, tol: float = 1e-8) -> LogisticFit:
    """Bernoulli maximum likelihood by Newton/IRLS.

    All-zero columns are held at 0. If the coefficient norm diverges
    (separation) the fit is redone with a small ridge penalty and marked
    ``penalized``.
    """
    X, y = design.X, design.y
    if X.shape[0] != len(y):
        raise StatsError("label and design row counts differ")
    n1 = int(np.sum(y == 1))
    if n1 == 0 or n1 == len(y):
        raise StatsError("need at least one positive and one negative row")
    if not np.all((y == 0) | (y == 1)):
        raise StatsError("labels must be 0/1")
    active = np.flatnonzero(np.any(X != 0, axis=0))
    beta, history, converged, it = _irls(X, y, active, 0.0, max_iter, tol)
    penalized = False
    fitted = sps.logistic.cdf(X @ beta)
    separated = np.all(np.abs(y - fitted) < 1e-6)
    if separated or np.linalg.norm(beta) > SEPARATION_NORM or not np.all(np.isfinite(beta)):
        log.warning("separation detected; refitting with ridge %g", RIDGE)
        beta, history, converged, it = _irls(X, y, active, RIDGE, max_iter, tol)
        penalized = True
    mu = sps.logistic.cdf(X @ beta)
    Xa = X[:, active]
    info = Xa.T @ (Xa * (mu * (1 - mu))[:, None])
    if penalized:
        info = info + np.diag(np.r_[0.0, np.full(X.shape[1] - 1, RIDGE)][active])
    se = np.full(X.shape[1], np.nan)
    try:
        cov = np.linalg.inv(info)
        se[active] = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        pass
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    pv = 2.0 * sps.norm.sf(np.abs(z))
    return LogisticFit(list(design.columns), beta, se, pv, log_likelihood(beta, X, y), converged, len(y), it,
                       penalized, history, dict(design.groups))


# --- likelihood-ratio ablation --------------------------------------------------------

@dataclass
class LRTResult:
    dropped_group: str
    lam: float
    dof: int
    loglik_full: float
    loglik_reduced: float
    normalized_share: float = float("nan")


def lrt(full: LogisticFit, reduced_design: DesignMatrix, dropped_group: str = "") -> LRTResult:
    """``lambda = 2 (ll_full - ll_reduced)``, clipped at zero."""
    if reduced_design.X.shape[0] != full.n:
        raise StatsError(f"reduced design has {reduced_design.X.shape[0]} rows, full fit used {full.n}")
    missing = [c for c in reduced_design.columns if c not in full.columns]
    if missing:
        raise StatsError(f"reduced design is not nested in the full model: {missing}")
    reduced = fit_logistic(reduced_design)
    lam = max(0.0, 2.0 * (full.loglik - reduced.loglik))
    return LRTResult(dropped_group, lam, len(full.columns) - len(reduced_design.columns), full.loglik,
                     reduced.loglik)


def group_ablation(design: DesignMatrix, full: LogisticFit | None = None) -> list[LRTResult]:
    """One LRT per group, with each lambda's share of the group total."""
    full = full or fit_logistic(design)
    tags = []
    for c in design.columns:
        g = design.groups.get(c)
        if g is not None and g not in tags:
            tags.append(g)
    out = [lrt(full, design.drop_group(g), g) for g in tags]
    total = sum(r.lam for r in out)
    for r in out:
        r.normalized_share = r.lam / total if total > 0 else float("nan")
    return out


def fit_bins(design: DesignMatrix, ablation: bool = True):
    """Per-bin logistic fits; returns ``(coefficients, lrt_rows)`` data frames."""
    coefs, lrts = [], []
    for b in np.unique(design.bins):
        sub = design.for_bin(b)
        y = sub.y
        if y.sum() == 0 or y.sum() == len(y):
            log.info("bin %s skipped: single class", b)
            continue
        fit = fit_logistic(sub)
        coefs.append(fit.table(int(b)))
        if ablation:
            for r in group_ablation(sub, fit):
                lrts.append({"bin": int(b), "group": r.dropped_group, "lambda": r.lam, "dof": r.dof,
                             "normalized_share": r.normalized_share})
    coef_df = pd.concat(coefs, ignore_index=True) if coefs else pd.DataFrame(
        columns=["bin", "variable", "group", "estimate", "se", "p", "converged"])
    lrt_df = pd.DataFrame(lrts, columns=["bin", "group", "lambda", "dof", "normalized_share"])
    return coef_df, lrt_df


# --- fixed-effects linear regression ------------------------------------------------

def within(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Subtract group means (the within transformation)."""
    values = np.asarray(values, dtype=float)
    codes, inv = np.unique(groups, return_inverse=True)
    flat = values.reshape(len(values), -1)
    counts = np.bincount(inv, minlength=len(codes)).astype(float)
    means = np.zeros((len(codes), flat.shape[1]))
    np.add.at(means, inv, flat)
    means /= counts[:, None]
    return (flat - means[inv]).reshape(values.shape)


@dataclass
class LinearFit:
    columns: list[str]
    coef: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    r2: float
    within_r2: float
    n: int
    n_groups: int

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"variable": self.columns, "estimate": self.coef, "se": self.se, "p": self.pvalues})


def fit_linear_fe(y, X, groups, columns=None) -> LinearFit:
    """Group fixed effects by within transformation, cluster-robust SEs by group.

    The sandwich uses the small-sample factor ``G/(G-1) * (n-1)/(n-k)``.
    With a single group the fit is OLS with an intercept and HC1 errors.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    groups = np.asarray(groups)
    n, k = X.shape
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(k)]
    codes, inv = np.unique(groups, return_inverse=True)
    G = len(codes)
    if G < 2:
        log.warning("single group: fitting plain OLS with intercept")
    yw, Xw = within(y, inv), within(X, inv)
    XtX = Xw.T @ Xw
    beta = np.linalg.solve(XtX, Xw.T @ yw)
    e = yw - Xw @ beta
    bread = np.linalg.inv(XtX)
    if G > 1:
        S = np.zeros((G, k))
        np.add.at(S, inv, Xw * e[:, None])
        c = G / (G - 1) * (n - 1) / max(n - k, 1)
        dof = G - 1
    else:
        # one cluster carries no sampling information; use per-observation (HC1) scores
        S = Xw * e[:, None]
        c = n / max(n - k - 1, 1)
        dof = max(n - k - 1, 1)
    cov = c * bread @ (S.T @ S) @ bread
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    pv = 2.0 * sps.t.sf(np.abs(t), dof)
    ssr = float(e @ e)
    sst = float(((y - y.mean()) ** 2).sum())
    sst_w = float(yw @ yw)
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    wr2 = 1.0 - ssr / sst_w if sst_w > 0 else float("nan")
    return LinearFit(columns, beta, se, pv, r2, wr2, n, G)
