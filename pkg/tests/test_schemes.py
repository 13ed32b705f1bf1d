import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ncvopt.schemes import EmptyNeighbourhood, from_sets, make_scheme, parse_rule


def test_loo():
    s = make_scheme("loo", 5)
    assert s.m == 5 and s.one_per_fold and s.symmetric_flag
    assert [s.alpha(k).tolist() for k in range(5)] == [[k] for k in range(5)]


def test_kfold_partitions_data():
    s = make_scheme("kfold", 23, folds=4, seed=3)
    allidx = np.sort(np.concatenate([s.alpha(k) for k in range(s.m)]))
    assert s.m == 4 and np.array_equal(allidx, np.arange(23))
    for k in range(4):
        assert np.array_equal(s.alpha(k), s.delta(k))
    assert np.array_equal(s.alpha_idx, make_scheme("kfold", 23, folds=4, seed=3).alpha_idx)


def test_window_rule():
    s = make_scheme("nei", 10, rule="window:2")
    assert s.alpha(0).tolist() == [0, 1, 2]
    assert s.alpha(5).tolist() == [3, 4, 5, 6, 7]
    assert s.symmetric_flag and s.one_per_fold


def test_window_on_column_keeps_boundary():
    t = np.array([0.0, 0.5, 1.0, 1.5, 3.0])
    s = make_scheme("nei", 5, meta={"t": t}, rule="window:1:t")
    assert s.alpha(0).tolist() == [0, 1, 2]
    assert s.alpha(4).tolist() == [4]


def test_knn_is_asymmetric_with_index_ties():
    x = np.array([0.0, 1.0, 2.0, 10.0])
    s = make_scheme("nei", 4, meta={"x": x}, rule="knn:1:x")
    assert s.alpha(1).tolist() == [0, 1]  # tie between 0 and 2 broken by index
    assert s.alpha(3).tolist() == [2, 3]
    assert not s.symmetric_flag


def test_box_and_radius():
    gi, gj = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    meta = {"i": gi.ravel(), "j": gj.ravel()}
    box = make_scheme("nei", 25, meta=meta, rule="box:1:coords(i,j)")
    rad = make_scheme("nei", 25, meta=meta, rule="radius:1:coords(i,j)")
    assert box.alpha_sizes[12] == 9 and rad.alpha_sizes[12] == 5
    assert box.alpha_sizes[0] == 4 and rad.alpha_sizes[0] == 3


def test_rule_combinators():
    meta = {"g": np.array(["a", "a", "b", "b", "a", "b"])}
    s = make_scheme("nei", 6, meta=meta, rule="same:g & window:1")
    assert s.alpha(1).tolist() == [0, 1]
    u = make_scheme("nei", 6, meta=meta, rule="same:g | window:1")
    assert u.alpha(0).tolist() == [0, 1, 4]


def test_forecast():
    s = make_scheme("forecast", 7, block=3)
    assert s.m == 3
    assert s.alpha(1).tolist() == [3, 4, 5, 6] and s.delta(1).tolist() == [3, 4, 5]


@pytest.mark.parametrize("rule", ["", "window", "knn:2.5:x", "box:1:x", "foo:3", "same:g:h", "window:-1"])
def test_bad_rules(rule):
    with pytest.raises(ValueError):
        parse_rule(rule)


def test_unknown_column_and_empty_sets():
    with pytest.raises(KeyError):
        make_scheme("nei", 3, meta={}, rule="same:g")
    with pytest.raises(EmptyNeighbourhood):
        from_sets("custom", 3, [[0], []], [[0], [1]])
    with pytest.raises(ValueError):
        from_sets("custom", 3, [[0, 3]], [[0]])
    with pytest.raises(ValueError):
        make_scheme("kfold", 5, folds=6)
    with pytest.raises(ValueError):
        make_scheme("bogus", 5)


@given(st.integers(1, 40), st.integers(0, 6))
def test_property_window_contains_self_and_is_symmetric(n, w):
    s = make_scheme("nei", n, rule=f"window:{w}")
    A = s.alpha_matrix().toarray()
    assert np.all(np.diag(A) == 1)
    assert np.array_equal(A, A.T)
    assert np.all(s.alpha_sizes <= 2 * w + 1)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.integers(1, 5))
def test_property_knn_sizes(xs, r):
    n = len(xs)
    s = make_scheme("nei", n, meta={"x": np.array(xs)}, rule=f"knn:{r}:x")
    assert np.all(s.alpha_sizes == min(r, n - 1) + 1)
    for k in range(n):
        assert k in s.alpha(k)


def test_window_one_interior():
    s = make_scheme("nei", 9, rule="window:1")
    for k in range(1, 8):
        assert s.alpha(k).tolist() == [k - 1, k, k + 1]


def test_radius_matches_brute_force():
    rng = np.random.default_rng(8)
    E, N = rng.uniform(size=80), rng.uniform(size=80)
    s = make_scheme("nei", 80, meta={"E": E, "N": N}, rule="radius:0.15:coords(E,N)")
    d = np.hypot(E[:, None] - E[None, :], N[:, None] - N[None, :])
    for k in range(80):
        assert s.alpha(k).tolist() == np.flatnonzero(d[k] <= 0.15).tolist()
    assert s.symmetric_flag
