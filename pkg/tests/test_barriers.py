import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobarrier.barriers import BARRIER_COLUMNS, detect_barriers, fit_residual_model, residual_table
from mobarrier.gravity import FitError


def model_from(d_phys, d_embed):
    pairs = [(f"a{k:03d}", f"b{k:03d}") for k in range(len(d_phys))]
    return fit_residual_model(pairs, d_phys, d_embed)


def test_residual_model_matches_polyfit():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.3, 20, 300)
    e = 0.2 + 0.1 * np.log(d) + rng.normal(0, 0.02, 300)
    m = model_from(d, e)
    beta, a = np.polyfit(np.log(d), e, 1)
    assert (m.intercept, m.beta) == pytest.approx((a, beta), rel=1e-9)
    assert np.allclose(m.residuals, e - m.predicted)
    with pytest.raises(FitError):
        model_from(np.r_[0.0, d[:5]], e[:6])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.25, 0.1, 1.0]))
def test_per_bin_counts_and_top_residuals(seed, q):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 200))
    d = rng.uniform(0.01, 6, n)
    # coarse residual values force ties
    e = np.round(rng.normal(0, 1, n), 1)
    m = model_from(d, e)
    bs = detect_barriers(m, q=q)
    bins = np.ceil(d).astype(int)
    for b in np.unique(bins):
        idx = np.flatnonzero(bins == b)
        k = math.ceil(Fraction(q).limit_denominator(1000) * len(idx))
        got = bs.table[bs.table["bin"] == b]
        assert bs.bin_sizes[b] == len(idx)
        assert len(got) == k
        ranked = sorted(idx, key=lambda i: (-m.residuals[i], m.pairs[i]))[:k]
        assert list(zip(got.zone_i, got.zone_j)) == [m.pairs[i] for i in ranked]
        assert got["rank"].tolist() == list(range(1, k + 1))
    assert list(bs.table.columns) == BARRIER_COLUMNS


def test_float_guard_on_exact_multiples():
    # 0.05 * 60 evaluates to 3.0000000000000004 in floating point
    d = np.linspace(0.1, 0.9, 60)
    bs = detect_barriers(model_from(d, np.arange(60.0)), q=0.05)
    assert len(bs.table) == 3


def test_tie_break_by_pair_id():
    pairs = [("b", "c"), ("a", "z"), ("a", "b"), ("c", "d")]
    m = fit_residual_model(pairs, [0.5, 0.6, 0.7, 0.8], [1.0, 1.0, 1.0, 1.0])
    m.residuals = np.array([1.0, 1.0, 1.0, 0.0])
    bs = detect_barriers(m, q=0.75)
    assert list(zip(bs.table.zone_i, bs.table.zone_j)) == [("a", "b"), ("a", "z"), ("b", "c")]


def test_exclusions_and_skipped_bins():
    d = np.array([0.5, 0.6, 0.7, 3.5, 3.6])
    m = model_from(d, np.array([5.0, 1.0, 0.0, 1.0, 0.0]))
    m.residuals = np.array([5.0, 1.0, 0.0, 1.0, 0.0])
    bs = detect_barriers(m, excluded=[("b000", "a000")], q=0.5)
    assert ("a000", "b000") not in bs.pairs
    assert bs.bin_sizes == {1: 2, 4: 2}
    assert bs.skipped_bins == [2, 3]
    # main mode keeps the residuals of the supplied fit
    assert bs.table.residual.tolist() == [1.0, 1.0]


def test_soft_mode_refits_on_nonzero_pairs():
    rng = np.random.default_rng(1)
    d = rng.uniform(0.1, 5, 200)
    e = 0.3 * np.log(d) + rng.normal(0, 0.1, 200)
    m = model_from(d, e)
    nz = set(m.pairs[::2])
    bs = detect_barriers(m, q=0.25, flow_filter="nonzero_flow", nonzero_pairs=nz)
    sub = fit_residual_model(m.pairs[::2], d[::2], e[::2])
    assert set(bs.pairs) <= nz
    assert bs.mode == "soft" and (bs.table["mode"] == "soft").all()
    lookup = dict(zip(sub.pairs, sub.residuals))
    assert np.allclose(bs.table.residual, [lookup[p] for p in zip(bs.table.zone_i, bs.table.zone_j)])
    with pytest.raises(ValueError):
        detect_barriers(m, flow_filter="nonzero_flow")
    with pytest.raises(ValueError):
        detect_barriers(m, q=0.0)
    with pytest.raises(ValueError):
        detect_barriers(m, flow_filter="sometimes")


def test_residual_table_drops_missing(tmp_path):
    pairs, dp, de, n = residual_table([("a", "b"), ("a", "c")], [1.0, 2.0], [0.5, np.nan])
    assert pairs == [("a", "b")] and n == 1 and dp.tolist() == [1.0]
    bs = detect_barriers(fit_residual_model([("a", "b"), ("a", "c"), ("b", "c")], [1, 2, 3], [1, 3, 2]), q=1.0)
    bs.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == ",".join(BARRIER_COLUMNS)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5.0))
def test_inflating_a_flagged_pair_keeps_it_flagged(seed, delta):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(40, 200))
    d = rng.uniform(0.05, 4, n)
    e = 0.2 + 0.1 * np.log(d) + rng.normal(0, 0.05, n)
    m = model_from(d, e)
    bs = detect_barriers(m, q=0.1)
    flagged = sorted(bs.pairs)
    target = flagged[int(rng.integers(0, len(flagged)))]
    k = m.pairs.index(target)
    e2 = e.copy()
    e2[k] += delta
    assert target in detect_barriers(model_from(d, e2), q=0.1).pairs
