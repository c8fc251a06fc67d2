import json

import numpy as np
import pandas as pd
import pytest

from mobarrier.geo import ZoneMap
from mobarrier.synth import (
    CBR_REGRESSORS, PlantedTruth, SynthConfig, SynthError, evaluate_recovery, flow_weights, generate_cbr_users,
    generate_city, generate_trajectories, load_truth, write_city,
)

SMALL = dict(n_zones=64, users=20, tokens_per_user=40, barrier_fraction=0.05, seed=3)


def test_config_validation():
    for bad in ({"n_zones": 50}, {"suppression": 1.0}, {"users": 0}, {"barrier_fraction": -0.1},
                {"stays_per_day": 1}):
        with pytest.raises(SynthError):
            SynthConfig(**bad)


def test_flow_weights_follow_gravity():
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    m = np.array([1.0, 2.0, 4.0])
    mask = np.zeros((3, 3), bool)
    mask[0, 2] = mask[2, 0] = True
    w = flow_weights(xy, m, 2.0, mask, 0.1)
    assert np.diag(w).tolist() == [0, 0, 0]
    assert w[0, 1] == pytest.approx(2.0)
    assert w[1, 2] == pytest.approx(8 / 4)
    assert w[0, 2] == pytest.approx(0.1 * 4 / 9)
    assert np.allclose(w, w.T)


def test_city_is_deterministic_and_planted():
    a, b = generate_city(SynthConfig(**SMALL)), generate_city(SynthConfig(**SMALL))
    assert a.truth.planted == b.truth.planted and np.array_equal(a.truth.flow, b.truth.flow)
    assert a.truth.planted
    inside = {f for r0, c0, k in a.truth.districts
              for f in (a.zones.ids[r * 8 + c] for r in range(r0, r0 + k) for c in range(c0, c0 + k))}
    for i, j in a.truth.planted:
        assert (i in inside) != (j in inside)
    assert all(i < j for i, j in a.truth.planted)
    none = generate_city(SynthConfig(**{**SMALL, "barrier_fraction": 0.0}))
    assert not none.truth.planted


def test_trajectories_are_per_user_streams():
    city = generate_city(SynthConfig(**SMALL))
    df = generate_trajectories(city)
    assert len(df) == 20 * 40
    assert (df.t_end > df.t_start).all()
    assert (df.groupby("user_id").t_start.diff().dropna() > 0).all()
    assert (df.utc_offset == city.cfg.utc_offset).all()
    assert df.groupby("user_id").home_zone.nunique().eq(1).all()
    more = generate_trajectories(generate_city(SynthConfig(**{**SMALL, "users": 25})))
    pd.testing.assert_frame_equal(df, more[more.user_id < "U00020"].reset_index(drop=True))


def test_evaluate_recovery():
    t = PlantedTruth(["a", "b", "c"], np.ones(3), np.zeros((3, 3)), {("a", "b"), ("b", "c")})
    r = evaluate_recovery([("b", "a"), ("a", "c")], t)
    assert (r["precision"], r["recall"], r["n_hit"]) == (0.5, 0.5, 1)
    r = evaluate_recovery([("b", "a"), ("a", "c")], t, eligible=[("a", "b"), ("a", "c")])
    assert (r["precision"], r["recall"], r["n_planted"]) == (0.5, 1.0, 1)
    with pytest.raises(SynthError):
        evaluate_recovery([], PlantedTruth([], np.ones(0), np.zeros((0, 0))))
    with pytest.raises(SynthError):
        evaluate_recovery([], t, eligible=[("a", "c")])


def test_cbr_users_shape_and_determinism():
    X, y, g, betas = generate_cbr_users(500, 4, seed=1)
    assert X.shape == (500, len(CBR_REGRESSORS)) and y.shape == g.shape == (500,)
    assert set(np.unique(g)) <= set(range(4))
    X2, y2, _, _ = generate_cbr_users(500, 4, seed=1)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
    _, _, _, custom = generate_cbr_users(10, 2, betas={k: 0.0 for k in CBR_REGRESSORS})
    assert set(custom.values()) == {0.0}


def test_write_city_files(tmp_path):
    city = generate_city(SynthConfig(**SMALL))
    manifest = write_city(city, tmp_path)
    for name in manifest["files"].values():
        assert (tmp_path / name).exists()
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["seed"] == 3
    back = load_truth(tmp_path / "truth.json")
    assert back.planted == city.truth.planted and back.zone_ids == city.zones.ids
    assert np.allclose(back.masses, city.truth.masses)
    zones = ZoneMap.from_geojson(tmp_path / "zones.geojson")
    assert zones.ids == city.zones.ids
    demo = pd.read_csv(tmp_path / "demographics.csv", dtype={"zone_id": str})
    assert demo.zone_id.tolist() == city.zones.ids
