import numpy as np
import pytest
from numpy.testing import assert_allclose

from ncvopt.fit import fit_inner
from ncvopt.model import ModelSpec, build_design
from ncvopt.fit import Problem
from ncvopt.families import Gaussian
from ncvopt.ncv import ncv
from ncvopt.optimize import (
    OptimizerSettings,
    default_rho0,
    line_search,
    minimize_nested,
    ncv_criterion,
    optimize_ncv,
)
from ncvopt.schemes import from_sets, make_scheme

from conftest import smooth_problem


def test_line_search_strong_wolfe_on_quadratic():
    # phi(a) = (a - 3)^2
    def phi(a):
        return (a - 3.0) ** 2, 2 * (a - 3.0), a

    a, f, aux, ok = line_search(phi, 9.0, -6.0, amax=10.0)
    assert ok and f <= 9.0 + 1e-4 * a * -6.0 and abs(2 * (a - 3)) <= 0.9 * 6.0


def test_line_search_backs_off_non_finite():
    def phi(a):
        if a > 0.5:
            return np.inf, np.nan, None
        return (a - 3.0) ** 2, 2 * (a - 3.0), a

    a, f, aux, ok = line_search(phi, 9.0, -6.0, amax=4.0)
    assert 0 < a <= 0.5 and f < 9.0


def test_loo_optimum_matches_grid():
    pb = smooth_problem(n=150, k=12, seed=3)
    sch = make_scheme("loo", 150)
    res = optimize_ncv(pb, sch)
    assert res.state.converged
    grid = np.linspace(-6, 10, 321)
    vals = [ncv(fit_inner(pb, [r]), sch, gradient=False).value for r in grid]
    assert res.state.V <= min(vals) + 1e-8 * abs(min(vals))
    assert abs(res.state.rho[0] - grid[int(np.argmin(vals))]) < 0.1
    assert np.max(np.abs(res.criterion.grad_rho)) < 1e-6 * (1 + res.state.V)


def test_two_smooths_converge_and_trace():
    rng = np.random.default_rng(2)
    n = 300
    x, z = rng.uniform(size=n), rng.uniform(size=n)
    y = np.sin(2 * np.pi * x) + 0.0 * z + 0.3 * rng.normal(size=n)
    design = build_design(ModelSpec((["s(x,k=10)", "s(z,k=10)"],)), {"x": x, "z": z})
    pb = Problem(design, y, Gaussian())
    recs = []
    res = optimize_ncv(pb, make_scheme("nei", n, rule="window:2"), trace=recs.append)
    assert res.state.converged, res.state.message
    assert len(recs) == res.state.iter and recs[-1]["V"] == res.state.V
    assert all(b["V"] <= a["V"] for a, b in zip(recs, recs[1:]))
    # the null smooth of z shrinks to its unpenalized linear part
    assert res.fm.edf_terms[2] < 1.1


def test_bounds_respected():
    pb = smooth_problem(n=60, k=8, y=np.zeros(60))
    st = OptimizerSettings(rho_bound=4.0)
    res = optimize_ncv(pb, make_scheme("loo", 60), rho0=[3.5], settings=st)
    assert np.all(np.abs(res.state.rho) <= 4.0)


def test_default_rho0_is_finite():
    pb = smooth_problem()
    r = default_rho0(pb)
    assert r.shape == (1,) and np.all(np.isfinite(r))


def test_all_singular_criterion_is_infinite():
    pb = smooth_problem(n=30, k=6)
    fm = fit_inner(pb, [0.0])
    crit = ncv_criterion(from_sets("custom", 30, [np.arange(30)], [[0]]))
    v, g, _ = crit(fm)
    assert v == np.inf and np.all(np.isnan(g))
    with pytest.raises(RuntimeError):
        minimize_nested(pb, crit)


def test_no_smoothing_parameters():
    x = np.linspace(0, 1, 50)
    design = build_design(ModelSpec((["lin(x)"],)), {"x": x})
    pb = Problem(design, 2 * x + np.random.default_rng(0).normal(size=50), Gaussian())
    res = optimize_ncv(pb, make_scheme("loo", 50))
    assert res.state.converged and res.state.rho.shape == (0,)
    assert_allclose(res.fm.edf, 2.0)


def test_start_at_optimum_stays_put():
    pb = smooth_problem(n=150, k=12, seed=3)
    sch = make_scheme("loo", 150)
    first = optimize_ncv(pb, sch)
    again = optimize_ncv(pb, sch, rho0=first.state.rho)
    assert again.state.converged and again.state.iter <= 2
    assert np.max(np.abs(again.state.rho - first.state.rho)) < 1e-3


def test_linear_truth_is_frozen_at_null_space():
    x = np.linspace(0, 1, 200)
    y = 1 + 2 * x + 0.3 * np.random.default_rng(9).normal(size=200)
    pb = smooth_problem(n=200, k=10, x=x, y=y)
    sch = make_scheme("loo", 200)
    res = optimize_ncv(pb, sch)
    assert abs(res.fm.edf - 2.0) <= 0.2
    # freezing never hides a meaningful gradient
    g = ncv(res.fm, sch).grad_rho
    assert np.max(np.abs(g)) < 10 * 1e-6 * (1 + abs(res.state.V))
