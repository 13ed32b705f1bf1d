"""Cross-validation fold structures: dropped sets alpha(k) and predicted sets
delta(k), stored in CSR layout.

Neighbourhood rules are small strings combined with ``&`` (intersection,
binds tighter) and ``|`` (union)::

    window:4              |i - j| <= 4 on row order
    window:2.5:t          |t_i - t_j| <= 2.5 on column t
    knn:8:x               the 8 nearest neighbours on column x (ties by index)
    radius:0.3:coords(E,N)  Euclidean distance <= 0.3
    box:2:coords(x,z)     Chebyshev distance <= 2
    same:g                equal value of column g

Every point is always its own neighbour.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree


class EmptyNeighbourhood(ValueError):
    pass


@dataclass(frozen=True)
class NeighbourhoodScheme:
    """``m`` folds; fold ``k`` drops ``alpha(k)`` and predicts ``delta(k)``."""

    kind: str
    n: int
    alpha_ptr: np.ndarray
    alpha_idx: np.ndarray
    delta_ptr: np.ndarray
    delta_idx: np.ndarray
    symmetric_flag: bool
    rule: str = ""

    @property
    def m(self) -> int:
        return len(self.alpha_ptr) - 1

    def alpha(self, k: int) -> np.ndarray:
        return self.alpha_idx[self.alpha_ptr[k] : self.alpha_ptr[k + 1]]

    def delta(self, k: int) -> np.ndarray:
        return self.delta_idx[self.delta_ptr[k] : self.delta_ptr[k + 1]]

    @property
    def alpha_sizes(self) -> np.ndarray:
        return np.diff(self.alpha_ptr)

    @property
    def one_per_fold(self) -> bool:
        """True when ``m = n`` and ``delta(k) = {k}``."""
        return self.m == self.n and np.array_equal(self.delta_idx, np.arange(self.n)) and np.all(
            np.diff(self.delta_ptr) == 1
        )

    def alpha_matrix(self) -> sp.csr_matrix:
        """m x n indicator of the dropped sets."""
        data = np.ones(len(self.alpha_idx))
        return sp.csr_matrix((data, self.alpha_idx, self.alpha_ptr), shape=(self.m, self.n))

    def fold_of_entry(self, which: str = "alpha") -> np.ndarray:
        ptr = self.alpha_ptr if which == "alpha" else self.delta_ptr
        return np.repeat(np.arange(self.m), np.diff(ptr))

    @cached_property
    def canonical(self) -> tuple:
        """``(perm, scheme)`` with folds sorted lexicographically by
        ``(alpha, delta)``; fold ``c`` of ``scheme`` is fold ``perm[c]`` here.
        Reductions over folds use this order, so results do not depend on how
        the folds are listed."""
        perm = np.array(
            sorted(range(self.m), key=lambda k: (tuple(self.alpha(k)), tuple(self.delta(k)))), dtype=np.int64
        )
        if np.array_equal(perm, np.arange(self.m)):
            return perm, self
        a_ptr, a_idx = _reorder(self.alpha_ptr, self.alpha_idx, perm)
        d_ptr, d_idx = _reorder(self.delta_ptr, self.delta_idx, perm)
        return perm, NeighbourhoodScheme(self.kind, self.n, a_ptr, a_idx, d_ptr, d_idx, self.symmetric_flag, self.rule)


def _reorder(ptr, idx, perm):
    sizes = np.diff(ptr)[perm]
    new_ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    new_idx = np.concatenate([idx[ptr[k] : ptr[k + 1]] for k in perm]) if len(perm) else idx[:0]
    return new_ptr, new_idx


def from_sets(kind, n, alphas, deltas, rule="") -> NeighbourhoodScheme:
    """Build a scheme from lists of index collections, validating them."""
    if len(alphas) != len(deltas) or len(alphas) == 0:
        raise ValueError("need the same positive number of alpha and delta sets")
    a_ptr, a_idx = _csr(alphas, n, "alpha")
    d_ptr, d_idx = _csr(deltas, n, "delta")
    sym = False
    if len(alphas) == n:
        A = sp.csr_matrix((np.ones(len(a_idx)), a_idx, a_ptr), shape=(n, n))
        sym = (A != A.T).nnz == 0
    return NeighbourhoodScheme(kind, n, a_ptr, a_idx, d_ptr, d_idx, bool(sym), rule)


def _csr(sets, n, what):
    ptr = np.zeros(len(sets) + 1, dtype=np.int64)
    chunks = []
    for k, s in enumerate(sets):
        s = np.unique(np.asarray(s, dtype=np.int64))
        if s.size == 0:
            raise EmptyNeighbourhood(f"{what}({k}) is empty")
        if s[0] < 0 or s[-1] >= n:
            raise ValueError(f"{what}({k}) has indices outside 0..{n - 1}")
        chunks.append(s)
        ptr[k + 1] = ptr[k] + s.size
    return ptr, np.concatenate(chunks)


def _from_matrix(kind, A: sp.spmatrix, rule="") -> NeighbourhoodScheme:
    A = sp.csr_matrix(A, dtype=bool)
    A = (A + sp.identity(A.shape[0], dtype=bool, format="csr")).tocsr()
    A.sort_indices()
    n = A.shape[0]
    sym = (A != A.T).nnz == 0
    d_ptr = np.arange(n + 1, dtype=np.int64)
    d_idx = np.arange(n, dtype=np.int64)
    return NeighbourhoodScheme(
        kind, n, A.indptr.astype(np.int64), A.indices.astype(np.int64), d_ptr, d_idx, bool(sym), rule
    )


# ---------------------------------------------------------------- rules

_ATOM = re.compile(r"^(window|knn|radius|box|same)(?::([^:]+))?(?::(.+))?$")
_COORDS = re.compile(r"^coords\(\s*([^,()]+?)\s*,\s*([^,()]+?)\s*\)$")


def parse_rule(text: str):
    """Compile a rule string into ``f(meta, n) -> sparse bool n x n``."""
    text = text.strip()
    if not text:
        raise ValueError("empty neighbourhood rule")
    ors = [s.strip() for s in text.split("|")]
    compiled = [[_atom(a.strip()) for a in s.split("&")] for s in ors]

    def rule(meta, n):
        out = None
        for conj in compiled:
            A = None
            for f in conj:
                B = f(meta, n)
                A = B if A is None else A.multiply(B).tocsr()
            out = A if out is None else (out + A).tocsr()
        return out.astype(bool)

    return rule


def _atom(s):
    m = _ATOM.match(s)
    if not m:
        raise ValueError(f"cannot parse neighbourhood rule {s!r}")
    kind, a, b = m.groups()
    if kind == "same":
        if not a or b:
            raise ValueError(f"rule {s!r}: expected same:<column>")
        return lambda meta, n: _same(_col(meta, a), n)
    if a is None:
        raise ValueError(f"rule {s!r}: missing size parameter")
    size = float(a)
    if size < 0:
        raise ValueError(f"rule {s!r}: size must be non-negative")
    if kind == "window":
        return lambda meta, n: _window(None if b is None else _col(meta, b), size, n)
    if kind == "knn":
        if b is None or int(size) != size:
            raise ValueError(f"rule {s!r}: expected knn:<int>:<column>")
        return lambda meta, n: _knn(_col(meta, b), int(size), n)
    cm = _COORDS.match(b or "")
    if not cm:
        raise ValueError(f"rule {s!r}: expected coords(a,b)")
    c1, c2 = cm.groups()
    pnorm = 2 if kind == "radius" else np.inf
    return lambda meta, n: _ball(np.column_stack([_col(meta, c1), _col(meta, c2)]), size, pnorm, n)


def _col(meta, name):
    try:
        return np.asarray(meta[name])
    except (KeyError, IndexError, ValueError, TypeError):
        raise KeyError(f"neighbourhood rule refers to unknown column {name!r}") from None


def _window(t, w, n):
    if t is None:
        t = np.arange(n, dtype=float)
    return _ball(np.asarray(t, dtype=float)[:, None], w, 2, n)


def _ball(pts, d, pnorm, n):
    tree = cKDTree(pts)
    # small slack so points exactly on the boundary are kept
    A = tree.sparse_distance_matrix(tree, d * (1 + 1e-12) + 1e-300, p=pnorm, output_type="coo_matrix")
    A = sp.coo_matrix((np.ones(A.nnz, dtype=bool), (A.row, A.col)), shape=(n, n))
    return (A.tocsr() + sp.identity(n, dtype=bool, format="csr")).astype(bool)


def _knn(x, r, n):
    x = np.asarray(x, dtype=float)
    r = min(r, n - 1)
    idx = np.arange(n)
    rows, cols = [], []
    for i in range(n):
        # order by (distance, index); self excluded then re-added
        key = np.lexsort((idx, np.abs(x - x[i])))
        nb = key[key != i][:r]
        rows.extend([i] * (r + 1))
        cols.extend([i, *nb.tolist()])
    return sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n))


def _same(g, n):
    _, inv = np.unique(g, return_inverse=True)
    G = sp.csr_matrix((np.ones(n, dtype=bool), (np.arange(n), inv)))
    return (G @ G.T).astype(bool).tocsr()


# ---------------------------------------------------------------- schemes


def make_scheme(
    kind: str,
    n: int,
    meta=None,
    rule: str | None = None,
    folds: int = 10,
    seed: int = 0,
    block: int = 1,
) -> NeighbourhoodScheme:
    """Construct a fold scheme.

    Parameters
    ----------
    kind : {"loo", "kfold", "nei", "forecast"}
        ``nei`` requires ``rule``. ``forecast`` (experimental) predicts each
        consecutive block of ``block`` rows after dropping it and every
        later row.
    n : int
        Number of data.
    meta : mapping of column name to array, optional
        Covariates referenced by the rule.
    folds, seed : int
        Fold count and permutation seed for ``kfold``.
    """
    kind = kind.lower()
    if n < 1:
        raise ValueError("n must be positive")
    if kind == "loo":
        idx = np.arange(n, dtype=np.int64)
        ptr = np.arange(n + 1, dtype=np.int64)
        return NeighbourhoodScheme("loo", n, ptr, idx, ptr.copy(), idx.copy(), True, "")
    if kind == "kfold":
        if not 1 < folds <= n:
            raise ValueError("kfold needs 1 < folds <= n")
        perm = np.random.default_rng(seed).permutation(n)
        sets = np.array_split(perm, folds)
        return from_sets("kfold", n, sets, sets, rule=f"kfold:{folds}")
    if kind in ("nei", "neighbourhood", "neighborhood"):
        if not rule:
            raise ValueError("neighbourhood scheme needs a rule")
        A = parse_rule(rule)(meta if meta is not None else {}, n)
        return _from_matrix("nei", A, rule)
    if kind == "forecast":
        starts = np.arange(0, n, block)
        alphas = [np.arange(s, n) for s in starts]
        deltas = [np.arange(s, min(s + block, n)) for s in starts]
        return from_sets("forecast", n, alphas, deltas, rule=f"forecast:{block}")
    raise ValueError(f"unknown scheme kind {kind!r}")
