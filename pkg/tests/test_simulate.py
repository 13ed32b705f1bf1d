import numpy as np
import pytest

from ncvopt.simulate import (
    SimRecipe,
    TooManyFailures,
    ar1_errors,
    ma_errors,
    run_replicate,
    run_sim,
    simulate,
    spatial_error_sd,
    spatial_errors,
    summarize,
)


def test_ma_errors_unit_variance():
    e = ma_errors(200_000, 2, np.random.default_rng(0))
    assert 0.9 <= e.var() <= 1.1
    # lag-1 autocorrelation of a 5-term moving sum is 4/5
    assert abs(np.corrcoef(e[:-1], e[1:])[0, 1] - 0.8) < 0.02
    assert abs(np.corrcoef(e[:-5], e[5:])[0, 1]) < 0.02


def test_ar1_lag_one():
    e = ar1_errors(100_000, 0.6, np.random.default_rng(1))
    r = np.corrcoef(e[:-1], e[1:])[0, 1]
    assert 0.5 <= r <= 0.7
    assert abs(e.var() - 1 / (1 - 0.36)) < 0.1


def test_spatial_error_sd():
    w = (1.0, 0.5, 0.3)
    e = np.concatenate([spatial_errors(50, w, np.random.default_rng(s)) for s in range(20)])
    assert abs(e.std() / spatial_error_sd(w) - 1) < 0.02


def test_spatial_truth_scaling():
    d = simulate(SimRecipe(kind="spatial_ma", n=12), np.random.default_rng(0))
    assert d["y"].shape == (144,)
    assert abs(np.std(d["f"]) / d["sd_e"] - 0.95) < 1e-12
    assert abs(np.mean(d["f"])) < 1e-12


def test_count_response():
    d = simulate(SimRecipe(kind="ma_1d", n=300, family="poisson"), np.random.default_rng(0))
    assert np.all(d["y"] >= 0) and np.all(d["y"] == np.round(d["y"]))


def test_replicates_deterministic():
    r = SimRecipe(kind="ma_1d", n=200, reps=2, k=10, criteria=("ncv", "gcv"))
    a = run_replicate(r, 1)
    b = run_replicate(r, 1)
    assert a == b
    assert {x["criterion"] for x in a} == {"ncv", "gcv"}
    assert all(x["ok"] for x in a)


def test_run_sim_summary():
    r = SimRecipe(kind="ma_1d", n=200, reps=3, k=10, criteria=("ncv", "reml"))
    t = run_sim(r)
    rows = t.table_rows()
    assert [x["criterion"] for x in rows] == ["ncv", "reml"]
    assert all(x["n"] == 3 and x["failed"] == 0 and 0 <= x["cp"] <= 1 for x in rows)


def test_failures_counted():
    rows = [{"criterion": "ncv", "sn": 1.0, "ok": False}] * 2 + [
        {"criterion": "ncv", "sn": 1.0, "ok": True, "cover": 1.0, "mse": 0.1, "edf": 3.0}
    ]
    s = summarize(rows)["ncv"]
    assert s["failed"] == 2 and s["n"] == 1 and s["cp"] == 1.0


def test_too_many_failures(monkeypatch):
    import ncvopt.simulate as sim

    monkeypatch.setattr(sim, "run_replicate", lambda rec, rep: [{"criterion": "ncv", "sn": 1.0, "ok": False}])
    with pytest.raises(TooManyFailures):
        run_sim(SimRecipe(reps=5))


@pytest.mark.parametrize(
    "kw", [{"kind": "nope"}, {"n": 2}, {"ar": 1.0}, {"phi": 0.0}, {"criteria": ("ncv", "aic")}]
)
def test_recipe_validation(kw):
    with pytest.raises(ValueError):
        SimRecipe(**kw)


def test_default_rules():
    assert SimRecipe(kind="spatial_ma").rule == "box:2:coords(gi,gj)"
    assert SimRecipe(kind="ma_1d").rule == "window:4"
