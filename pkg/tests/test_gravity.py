from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from mobarrier.gravity import (
    FitError, FlowMatrix, aggregate_flows, fit_normalized_flux, normalized_flux, ols, r2_gap, write_fits,
)
from mobarrier.ingest import Trajectory


def traj(uid, segments):
    zones = [z for seg in segments for z in seg]
    n = len(zones)
    bounds, pos = [], 0
    for seg in segments:
        bounds.append((pos, pos + len(seg)))
        pos += len(seg)
    return Trajectory(uid, np.array(zones, dtype=object), np.arange(n), np.arange(n) + 1, np.zeros(n), np.zeros(n),
                      bounds, np.ones(n, dtype=np.int64))


def test_aggregate_flows_within_segments_only():
    t1 = traj("u1", [["a", "b", "b", "c"], ["c", "a"]])
    t2 = traj("u2", [["a", "b"]])
    f = aggregate_flows([t1, t2])
    assert f.counts == Counter({("a", "b"): 2, ("b", "c"): 1, ("c", "a"): 1})
    assert f.masses == {"a": 2, "b": 2, "c": 1}
    assert f.symmetric() == Counter({("a", "b"): 2, ("b", "c"): 1, ("a", "c"): 1})


def test_normalized_flux_formula():
    f = FlowMatrix(Counter({("a", "b"): 3, ("b", "a"): 1}), {"a": 2, "b": 4, "c": 1})
    y = normalized_flux(f, [("a", "b"), ("a", "c")])
    assert y[0] == pytest.approx(np.log10(4 / 8))
    assert np.isnan(y[1])


@given(st.lists(st.tuples(st.integers(-100, 100), st.floats(-100, 100)), min_size=3, max_size=40))
def test_ols_matches_linregress(points):
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points])
    if np.ptp(x) == 0:
        with pytest.raises(FitError):
            ols(x, y)
        return
    a, b, r2, resid = ols(x, y)
    ref = sps.linregress(x, y)
    assert b == pytest.approx(ref.slope, rel=1e-7, abs=1e-9)
    assert a == pytest.approx(ref.intercept, rel=1e-7, abs=1e-7)
    if np.ptp(y) > 1e-3:
        assert r2 == pytest.approx(ref.rvalue ** 2, abs=1e-8)
    assert np.allclose(resid, y - a - b * x, atol=1e-8)


def test_ols_errors():
    with pytest.raises(FitError):
        ols([1, 2], [1, 2])
    with pytest.raises(FitError):
        ols([1, 1, 1], [1, 2, 3])


def test_exact_power_law_recovered():
    rng = np.random.default_rng(0)
    zones = [f"z{k}" for k in range(30)]
    masses = {z: int(rng.integers(1, 5)) for z in zones}
    pairs, d, counts = [], [], Counter()
    for i in range(30):
        for j in range(i + 1, 30):
            dist = 1.0 + abs(i - j)
            t = 1e6 * masses[zones[i]] * masses[zones[j]] * dist ** -1.8
            counts[(zones[i], zones[j])] = t  # real-valued counts keep the law exact
            pairs.append((zones[i], zones[j]))
            d.append(dist)
    fit = fit_normalized_flux(FlowMatrix(counts, masses), pairs, np.array(d), "log_geo")
    assert fit.slope == pytest.approx(-1.8, rel=1e-10)
    assert fit.intercept == pytest.approx(6.0, rel=1e-10)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.n == len(pairs)


def test_fit_kinds_and_gap(tmp_path):
    f = FlowMatrix(Counter({("a", "b"): 10, ("a", "c"): 5, ("b", "c"): 1, ("a", "d"): 2}),
                   {"a": 1, "b": 1, "c": 1, "d": 1})
    pairs = [("a", "b"), ("a", "c"), ("b", "c"), ("a", "d")]
    geo = fit_normalized_flux(f, pairs, [1.0, 2.0, 4.0, 3.0], "log_geo")
    emb = fit_normalized_flux(f, pairs, [0.1, 0.2, 0.5, 0.3], "embed_cosine")
    assert geo.n == emb.n == 4
    assert r2_gap(emb, geo) == pytest.approx(emb.r2 - geo.r2)
    short = fit_normalized_flux(f, pairs[:3], [1.0, 2.0, 4.0], "log_geo")
    with pytest.raises(FitError):
        r2_gap(emb, short)
    with pytest.raises(FitError):
        fit_normalized_flux(f, pairs, [1, 2, 3, 4], "euclid")
    write_fits([geo, emb], tmp_path / "fits.json")
    assert "embed_cosine" in (tmp_path / "fits.json").read_text()


def test_flow_csv_roundtrip(tmp_path):
    f = FlowMatrix(Counter({("a", "b"): 3, ("b", "a"): 1}), {"a": 1, "b": 2})
    f.to_csv(tmp_path / "f.csv")
    g = FlowMatrix.from_csv(tmp_path / "f.csv", f.masses)
    assert g.counts == f.counts and g.masses == f.masses


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-50, 50))
def test_r2_invariant_to_affine_x(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 5, 30)
    y = 2 - x + rng.normal(0, 1, 30)
    assert ols(scale * x + shift, y)[2] == pytest.approx(ols(x, y)[2], abs=1e-9)
    assert ols(-scale * x + shift, y)[2] == pytest.approx(ols(x, y)[2], abs=1e-9)


def test_fit_invariant_to_direction_relabel():
    rng = np.random.default_rng(2)
    zones = [f"z{k}" for k in range(12)]
    counts = Counter({(a, b): int(rng.integers(1, 50)) for a in zones for b in zones if a != b and rng.random() < 0.6})
    masses = {z: int(rng.integers(1, 9)) for z in zones}
    pairs = [(a, b) for i, a in enumerate(zones) for b in zones[i + 1:]]
    d = rng.uniform(1, 10, len(pairs))
    fit = fit_normalized_flux(FlowMatrix(counts, masses), pairs, d, "log_geo")
    reversed_counts = Counter({(b, a): c for (a, b), c in counts.items()})
    rfit = fit_normalized_flux(FlowMatrix(reversed_counts, masses), pairs, d, "log_geo")
    assert (rfit.slope, rfit.intercept, rfit.r2, rfit.n) == (fit.slope, fit.intercept, fit.r2, fit.n)
