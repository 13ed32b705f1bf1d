import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ncvopt.families import Gaussian
from ncvopt.fit import Problem, fit_inner
from ncvopt.model import ModelSpec, build_design
from ncvopt.ncv import ncv
from ncvopt.schemes import make_scheme
from ncvopt.simulate import SimRecipe, simulate
from ncvopt.uq import (
    ClippedEigenvalueWarning,
    CovarianceEstimate,
    SchemeMismatch,
    autocorr_cov,
    bayes_bias_correct,
    bayes_cov,
    covariance,
    jackknife_cov,
    pointwise_bands,
    psd_repair,
)

from conftest import smooth_problem, spd


@pytest.fixture(scope="module")
def fitted():
    pb = smooth_problem(n=120, k=10, seed=4)
    return fit_inner(pb, [1.0])


def test_jackknife_equals_loo_autocorr_after_row_scaling(fitted):
    n = fitted.problem.n
    loo = make_scheme("loo", n)
    jk = jackknife_cov(fitted, loo).V_mat
    ac = autocorr_cov(fitted, loo, use_cv_residuals=False, scaled_by_edf=False).V_mat
    assert_allclose(jk, ac * (n - 1) / n, rtol=1e-10, atol=1e-14)


def test_autocorr_window_contains_cross_products(fitted):
    n = fitted.problem.n
    sch = make_scheme("nei", n, rule="window:2")
    D = ncv(fitted, make_scheme("loo", n), gradient=False).delta
    A = sch.alpha_matrix().toarray()
    want = 0.5 * (D.T @ A @ D + (D.T @ A @ D).T)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClippedEigenvalueWarning)
        got = autocorr_cov(fitted, sch, use_cv_residuals=False, scaled_by_edf=False)
    # equal up to eigenvalue clipping
    assert_allclose(got.V_mat, psd_repair(want)[0], rtol=1e-10, atol=1e-14)


def test_edf_scaling(fitted):
    loo = make_scheme("loo", fitted.problem.n)
    a = autocorr_cov(fitted, loo, use_cv_residuals=False, scaled_by_edf=False).V_mat
    b = autocorr_cov(fitted, loo, use_cv_residuals=False, scaled_by_edf=True).V_mat
    n = fitted.problem.n
    assert_allclose(b, a * n / (n - fitted.edf), rtol=1e-12)


def test_cv_residual_rescaling_inflates_loo(fitted):
    loo = make_scheme("loo", fitted.problem.n)
    a = autocorr_cov(fitted, loo, use_cv_residuals=False, scaled_by_edf=False).V_mat
    b = autocorr_cov(fitted, loo, use_cv_residuals=True, scaled_by_edf=False).V_mat
    assert np.trace(b) > np.trace(a)


def test_nu_is_one_when_vhat_is_frequentist(fitted):
    Vb = fitted.inverse()
    Vf = Vb @ fitted.H @ Vb
    out = bayes_bias_correct(fitted, CovarianceEstimate(Vf, "autocorr_robust"))
    assert_allclose(out.nu_hat, 1.0, rtol=1e-12)
    assert_allclose(out.V_mat, 0.5 * (Vb + Vb.T), rtol=1e-8, atol=1e-14)
    out2 = bayes_bias_correct(fitted, CovarianceEstimate(Vf, "autocorr_robust"), nu_method="logdet")
    assert_allclose(out2.nu_hat, 1.0, rtol=1e-8)


def test_bayes_cov_gaussian(fitted):
    pb = fitted.problem
    r = pb.y - fitted.eta[:, 0]
    c = bayes_cov(fitted)
    assert c.kind == "bayes_large_sample"
    # Gaussian deviance loss: posterior covariance phi (X'X + S_lam)^-1 = 2 phi H_lam^-1
    phi = r @ r / (pb.n - fitted.edf)
    assert_allclose(c.V_mat, 2 * phi * fitted.inverse(), rtol=1e-8)


def test_psd_repair():
    rng = np.random.default_rng(0)
    A = spd(rng, 6)
    V, k = psd_repair(A)
    assert k == 0 and np.allclose(V, A)
    B = A - 2 * np.linalg.eigvalsh(A)[-1] * np.outer(np.ones(6), np.ones(6)) / 6
    with pytest.warns(ClippedEigenvalueWarning):
        V, k = psd_repair(B)
    assert k >= 1 and np.linalg.eigvalsh(V).min() > -1e-10


def test_scheme_mismatch(fitted):
    n = fitted.problem.n
    with pytest.raises(SchemeMismatch):
        jackknife_cov(fitted, make_scheme("kfold", n, folds=5))
    knn = make_scheme("nei", n, meta={"x": np.arange(n) ** 1.5}, rule="knn:2:x")
    with pytest.raises(SchemeMismatch):
        autocorr_cov(fitted, knn)
    with pytest.raises(ValueError):
        covariance(fitted, make_scheme("loo", n), kind="sandwich")
    with pytest.raises(ValueError):
        bayes_bias_correct(fitted, bayes_cov(fitted))


def test_bands():
    V = np.diag([4.0, 1.0])
    b = pointwise_bands([1.0, 2.0], V, np.array([[1.0, 0.0], [0.0, 1.0]]), level=0.95)
    assert_allclose(b.fit, [1.0, 2.0])
    assert_allclose(b.se, [2.0, 1.0])
    assert_allclose(b.upper - b.fit, 1.959963984540054 * b.se)
    with pytest.raises(ValueError):
        pointwise_bands([1.0], V, np.ones((2, 3)))


@given(st.integers(0, 5), st.floats(-2, 6))
def test_property_covariance_psd_symmetric(w, rho):
    pb = smooth_problem(n=60, k=8, seed=9)
    fm = fit_inner(pb, [rho])
    sch = make_scheme("nei", 60, rule=f"window:{w}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c = covariance(fm, sch, ncv(fm, sch, gradient=False))
    assert np.array_equal(c.V_mat, c.V_mat.T)
    assert np.linalg.eigvalsh(c.V_mat).min() > -1e-10 * np.abs(c.V_mat).max()
    assert c.nu_hat > 0


def _lin_problem(x, y):
    d = build_design(ModelSpec((["lin(x)"],)), {"x": x})
    return Problem(d, np.asarray(y, dtype=float), Gaussian())


def test_jackknife_zero_for_replicated_data():
    d = build_design(ModelSpec(([],)), {}, n=10)
    fm = fit_inner(Problem(d, np.full(10, 3.0), Gaussian()), [])
    assert np.all(jackknife_cov(fm, make_scheme("loo", 10)).V_mat == 0)


def test_jackknife_matches_ols_refits():
    rng = np.random.default_rng(11)
    x = rng.uniform(size=40)
    pb = _lin_problem(x, 1 + x + rng.normal(size=40))
    fm = fit_inner(pb, [])
    X = pb.X
    reps = np.array([np.linalg.lstsq(np.delete(X, i, 0), np.delete(pb.y, i), rcond=None)[0] for i in range(40)])
    D = fm.beta - reps
    want = D.T @ D * 39 / 40
    assert_allclose(jackknife_cov(fm, make_scheme("loo", 40)).V_mat, want, rtol=1e-8)


def test_jackknife_halves_when_data_duplicated():
    rng = np.random.default_rng(12)
    x = rng.uniform(size=200)
    y = 1 + x + rng.normal(size=200)
    a = jackknife_cov(fit_inner(_lin_problem(x, y), []), make_scheme("loo", 200)).V_mat
    b = jackknife_cov(fit_inner(_lin_problem(np.tile(x, 2), np.tile(y, 2)), []), make_scheme("loo", 400)).V_mat
    assert np.all(np.abs(np.diag(b) / np.diag(a) - 0.5) < 0.1)


def test_white_noise_loo_matches_ols_variance():
    rng = np.random.default_rng(13)
    x = rng.uniform(size=500)
    pb = _lin_problem(x, 1 + x + rng.normal(size=500))
    fm = fit_inner(pb, [])
    got = np.diag(autocorr_cov(fm, make_scheme("loo", 500)).V_mat)
    want = np.diag(np.linalg.inv(pb.X.T @ pb.X))
    assert np.all(np.abs(got / want - 1) < 0.3)


def test_bias_correction_vanishes_without_penalty():
    pb = smooth_problem(n=120, k=10, seed=4)
    loo = make_scheme("loo", 120)
    size = []
    for rho in (-10.0, -15.0, -20.0):
        fm = fit_inner(pb, [rho])
        vhat = autocorr_cov(fm, loo)
        size.append(np.abs(bayes_bias_correct(fm, vhat).V_mat - vhat.V_mat).max() / np.abs(vhat.V_mat).max())
    # the correction is first order in lambda
    assert size[1] < 0.05 * size[0] and size[2] < 0.05 * size[1]


def test_zero_covariance_gives_zero_width_bands():
    b = pointwise_bands([1.0, 2.0], np.zeros((2, 2)), np.array([[1.0, 3.0], [2.0, -1.0]]))
    assert np.array_equal(b.upper, b.lower)


def test_cv_residuals_inflate_under_positive_autocorrelation():
    recipe = SimRecipe(kind="ar1_1d", n=300, reps=1)
    wins = 0
    for rep in range(20):
        data = simulate(recipe, np.random.default_rng(rep))
        pb = smooth_problem(n=300, k=15, x=data["x"], y=data["y"])
        fm = fit_inner(pb, [2.0])
        sch = make_scheme("nei", 300, rule="window:3")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = autocorr_cov(fm, sch, use_cv_residuals=False).V_mat
            b = autocorr_cov(fm, sch, use_cv_residuals=True).V_mat
        wins += np.trace(b) > np.trace(a)
    assert wins >= 18
