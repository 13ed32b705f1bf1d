import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ncvopt.model import (
    CovariateOutOfRange,
    MissingCovariate,
    ModelSpec,
    Smooth,
    Tensor,
    ThinPlate,
    bspline_basis,
    build_design,
    difference_matrix,
    difference_penalty,
    make_knots,
    parse_term,
    predict_linear,
)


def test_linear_block_centred():
    d = build_design(ModelSpec((["lin(x)"],)), {"x": np.array([0.0, 1.0, 2.0])})
    assert_allclose(d.X[:, 1], [-1.0, 0.0, 1.0])


def test_bspline_partition_of_unity():
    knots = make_knots(0.0, 1.0, 10)
    B = bspline_basis(np.linspace(0, 1, 57), knots)
    assert B.shape == (57, 10)
    assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)


def test_tensor_row_is_outer_product():
    g = np.linspace(0, 1, 7)
    x, z = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
    d = build_design(ModelSpec((["te(x,z,k=(5,5))"],)), {"x": x, "z": z})
    blk = d.blocks[1]
    raw = blk.raw_basis({"x": x, "z": z}, len(x))
    assert raw.shape[1] == 25
    bx = bspline_basis(x, blk.knots[0])
    bz = bspline_basis(z, blk.knots[1])
    assert_allclose(raw[10], np.outer(bx[10], bz[10]).ravel())


def test_difference_matrix_example():
    assert_allclose(difference_matrix(4, 2), [[1, -2, 1, 0], [0, 1, -2, 1]])


def test_penalty_null_space_linear():
    S = difference_penalty(12, 2)
    beta = 0.3 + 1.7 * np.arange(12)
    assert abs(beta @ S @ beta) < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_penalty_equals_second_difference_sum(seed):
    beta = np.random.default_rng(seed).normal(size=12)
    S = difference_penalty(12, 2)
    assert_allclose(beta @ S @ beta, np.sum(np.diff(beta, 2) ** 2), rtol=1e-12)


def test_penalties_symmetric_psd_and_null_dims():
    rng = np.random.default_rng(0)
    data = {"x": rng.uniform(size=200), "z": rng.uniform(size=200), "w": rng.uniform(size=200)}
    d = build_design(ModelSpec((["s(x,k=12)", "te(z,w,k=(5,6))"],)), data)
    assert d.M == 3
    for P in d.penalties:
        assert np.array_equal(P.S, P.S.T)
        ev = np.linalg.eigvalsh(P.S)
        assert ev.min() >= -1e-10 * ev.max()
    assert d.penalties[0].null_dim == 2


def test_identifiability_and_rank():
    rng = np.random.default_rng(1)
    data = {"x": rng.uniform(size=300), "z": rng.uniform(size=300), "g": rng.choice(list("abc"), 300)}
    d = build_design(ModelSpec((["s(x,k=10)", "s(z,k=8)", "fac(g)"],)), data)
    for b in d.blocks:
        if b.kind == "bspline_cubic":
            assert_allclose(d.X[:, b.cols].sum(axis=0), 0.0, atol=1e-9)
    assert np.linalg.matrix_rank(d.X) == d.p
    cols = np.concatenate([np.arange(b.start, b.stop) for b in d.blocks])
    assert np.array_equal(np.sort(cols), np.arange(d.p))


def test_tensor_margin_null_space():
    """A function of x alone, linear in the z-margin coefficients, gets no
    z-margin penalty."""
    t = Tensor(("x", "z"), k=(5, 6))
    g = np.linspace(0, 1, 9)
    x, z = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
    d = build_design(ModelSpec(([t],)), {"x": x, "z": z})
    blk = d.blocks[1]
    pens = blk.core_penalties()
    coef = np.outer(np.random.default_rng(2).normal(size=5), np.ones(6)).ravel()
    assert abs(coef @ pens[1] @ coef) < 1e-10
    assert coef @ pens[0] @ coef > 1e-3


def test_thin_plate_reproduces_planes():
    g = np.linspace(0, 1, 12)
    x, z = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
    d = build_design(ModelSpec((["tp(x,z,k=40)"],)), {"x": x, "z": z})
    assert d.p == 40
    assert d.penalties[0].null_dim == 3
    y = 1 + x - 2 * z
    coef, *_ = np.linalg.lstsq(d.X, y, rcond=None)
    S = d.penalties[0].S
    # the unpenalized least-squares fit is exact and costs no penalty
    assert_allclose(d.X @ coef, y, atol=1e-8)
    null = np.linalg.eigh(S)[1][:, np.linalg.eigvalsh(S) < 1e-10 * np.linalg.eigvalsh(S).max()]
    proj = null @ np.linalg.lstsq(d.X @ null, y, rcond=None)[0]
    assert_allclose(d.X @ proj, y, atol=1e-8)


def test_predict_linear_examples():
    d = build_design(ModelSpec((["lin(x)"],)), {"x": np.arange(3.0)})
    assert_allclose(predict_linear(d, d.X, np.zeros(d.p)), 0.0)
    eta = predict_linear(d, np.eye(2), np.array([1.0, 2.0]))
    assert_allclose(eta[:, 0], [1.0, 2.0])


def test_predict_linear_two_predictors():
    rng = np.random.default_rng(3)
    data = {"x": rng.uniform(size=50), "z": rng.uniform(size=50)}
    d = build_design(ModelSpec((["s(x,k=6)"], ["s(z,k=5)"]), "gaussian_ls"), data)
    beta = rng.normal(size=d.p)
    eta = predict_linear(d, d.X, beta)
    for k, J in enumerate(d.predictor_cols):
        assert_allclose(eta[:, k], d.X[:, J] @ beta[J])


def test_errors():
    with pytest.raises(MissingCovariate):
        build_design(ModelSpec((["s(x)"],)), {"z": np.arange(5.0)})
    d = build_design(ModelSpec((["s(x,k=6)"],)), {"x": np.linspace(0, 1, 30)})
    with pytest.raises(CovariateOutOfRange):
        d.blocks[1].basis({"x": np.array([5.0])}, 1)
    for bad in ["s(x", "q(x)", "s(x, z)", "s(1)", "te(x)", "tp(x)"]:
        with pytest.raises(ValueError):
            parse_term(bad)
    with pytest.raises(ValueError):
        Smooth("x", k=2)


def test_parse_terms():
    assert parse_term("s(x, k=20, m=3)") == Smooth("x", 20, 3)
    assert parse_term("te(x, z, k=(5, 6))").k == (5, 6)
    assert parse_term("tp(x, z, k=50)") == ThinPlate(("x", "z"), 50)
