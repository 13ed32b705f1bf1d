import numpy as np
import pytest
from numpy.testing import assert_allclose

from ncvopt.comparators import UnsupportedFamily, gcv_criterion, gcv_value, reml_gaussian, reml_phi
from ncvopt.optimize import minimize_nested, optimize_ncv
from ncvopt.schemes import make_scheme
from ncvopt.families import GaussianLS, Poisson
from ncvopt.fit import Problem, fit_inner
from ncvopt.model import ModelSpec, build_design
from ncvopt.families import Gaussian

from conftest import smooth_problem


def two_smooth_problem(family=None, y=None):
    rng = np.random.default_rng(8)
    n = 160
    x, z = rng.uniform(size=n), rng.uniform(size=n)
    if y is None:
        y = np.sin(3 * x) + z**2 + 0.3 * rng.normal(size=n)
    design = build_design(ModelSpec((["s(x,k=8)", "s(z,k=7)"],)), {"x": x, "z": z})
    return Problem(design, y, family or Gaussian())


def fd(f, rho, h=1e-5):
    out = []
    for j in range(len(rho)):
        e = np.zeros(len(rho))
        e[j] = h
        out.append((f(rho + e) - f(rho - e)) / (2 * h))
    return np.array(out)


def test_gcv_hand_formula():
    pb = smooth_problem(n=100, k=10)
    rho = 0.4
    fm = fit_inner(pb, [rho])
    X = pb.X
    A = X @ np.linalg.solve(X.T @ X + np.exp(rho) * pb.S[0], X.T)
    r = pb.y - A @ pb.y
    assert_allclose(gcv_value(fm, False)[0], 100 * (r @ r) / (100 - np.trace(A)) ** 2, rtol=1e-10)


def test_reml_dense_formula():
    pb = two_smooth_problem()
    rho = np.array([0.3, -0.8])
    fm = fit_inner(pb, rho)
    lam = np.exp(rho)
    Sl = pb.penalty_matrix(lam)
    ev = np.linalg.eigvalsh(Sl)
    pos = ev > 1e-9 * ev.max()
    Mp = pb.p - pos.sum()
    r = pb.y - pb.X @ fm.beta
    phi = (r @ r + fm.beta @ Sl @ fm.beta) / (pb.n - Mp)
    want = (pb.n - Mp) * np.log(phi) + np.linalg.slogdet(pb.X.T @ pb.X + Sl)[1] - np.log(ev[pos]).sum()
    assert_allclose(reml_gaussian(fm, False)[0], want, rtol=1e-9)
    assert_allclose(reml_phi(fm), phi, rtol=1e-12)


@pytest.mark.parametrize("family", ["gaussian", "poisson"])
def test_gcv_gradient(family):
    if family == "poisson":
        y = np.random.default_rng(1).poisson(3.0, 160).astype(float)
        pb = two_smooth_problem(Poisson(), y)
    else:
        pb = two_smooth_problem()
    rho = np.array([0.5, 1.5])
    g = gcv_value(fit_inner(pb, rho))[1]
    want = fd(lambda r: gcv_value(fit_inner(pb, r), False)[0], rho)
    assert np.max(np.abs(g - want)) / np.max(np.abs(want)) < 1e-5


def test_reml_gradient():
    pb = two_smooth_problem()
    rho = np.array([0.5, -1.0])
    g = reml_gaussian(fit_inner(pb, rho))[1]
    want = fd(lambda r: reml_gaussian(fit_inner(pb, r), False)[0], rho)
    assert np.max(np.abs(g - want)) / np.max(np.abs(want)) < 1e-5


def test_unsupported_families():
    y = np.random.default_rng(0).poisson(2.0, 160).astype(float)
    with pytest.raises(UnsupportedFamily):
        reml_gaussian(fit_inner(two_smooth_problem(Poisson(), y), [0.0, 0.0]))
    x = np.linspace(0, 1, 80)
    design = build_design(ModelSpec((["s(x,k=6)"], ["s(x,k=5)"]), "gaussian_ls"), {"x": x})
    pb = Problem(design, np.sin(x) + np.random.default_rng(0).normal(size=80), GaussianLS())
    with pytest.raises(UnsupportedFamily):
        gcv_value(fit_inner(pb, [0.0, 0.0]))


def test_linear_truth_gcv_and_ncv_agree():
    x = np.linspace(0, 1, 200)
    y = 1 + 2 * x + 0.3 * np.random.default_rng(10).normal(size=200)
    pb = smooth_problem(n=200, k=10, x=x, y=y)
    a = minimize_nested(pb, gcv_criterion()).fm.edf
    b = optimize_ncv(pb, make_scheme("loo", 200)).fm.edf
    assert abs(a - b) < 0.5
