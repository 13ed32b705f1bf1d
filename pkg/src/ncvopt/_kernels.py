"""Compiled inner loops for Cholesky up/downdating and per-fold solves.

All kernels work on upper-triangular factors ``R`` with ``R.T @ R = H`` and
release the GIL, so fold ranges can be mapped over a thread pool.
"""

import math

import numpy as np
from numba import njit

OK = 0
INDEFINITE = 1
SINGULAR = 2


@njit(cache=True, nogil=True)
def rank1_update(R, u):
    """In-place update ``R.T R + u u.T``. Always succeeds."""
    p = R.shape[0]
    x = u.copy()
    for k in range(p):
        xk = x[k]
        if xk == 0.0:
            continue
        rkk = R[k, k]
        r = math.hypot(rkk, xk)
        c = r / rkk
        s = xk / rkk
        R[k, k] = r
        for j in range(k + 1, p):
            R[k, j] = (R[k, j] + s * x[j]) / c
            x[j] = c * x[j] - s * R[k, j]


@njit(cache=True, nogil=True)
def rank1_downdate(R, u, eps, work):
    """Hyperbolic-rotation downdate ``R.T R - u u.T``.

    New rows are written to ``work`` and only copied back into ``R`` once every
    pivot has passed, so a failed attempt leaves ``R`` untouched. Returns False
    when a squared pivot drops below ``eps`` times the squared diagonal.
    """
    p = R.shape[0]
    x = u.copy()
    k0 = p
    for k in range(p):
        if x[k] != 0.0:
            k0 = k
            break
    for k in range(k0, p):
        rkk = R[k, k]
        xk = x[k]
        r2 = rkk * rkk - xk * xk
        if not r2 > eps * rkk * rkk:
            return False
        if xk == 0.0:
            for j in range(k, p):
                work[k, j] = R[k, j]
            continue
        r = math.sqrt(r2)
        c = r / rkk
        s = xk / rkk
        work[k, k] = r
        for j in range(k + 1, p):
            work[k, j] = (R[k, j] - s * x[j]) / c
            x[j] = c * x[j] - s * work[k, j]
    for k in range(k0, p):
        for j in range(k, p):
            R[k, j] = work[k, j]
    return True


@njit(cache=True, nogil=True)
def forward_solve(R, b):
    """Solve ``R.T x = b``."""
    p = R.shape[0]
    x = b.copy()
    for i in range(p):
        acc = x[i]
        for k in range(i):
            acc -= R[k, i] * x[k]
        x[i] = acc / R[i, i]
    return x


@njit(cache=True, nogil=True)
def back_solve(R, b):
    """Solve ``R x = b``."""
    p = R.shape[0]
    x = b.copy()
    for i in range(p - 1, -1, -1):
        acc = x[i]
        for k in range(i + 1, p):
            acc -= R[i, k] * x[k]
        x[i] = acc / R[i, i]
    return x


@njit(cache=True, nogil=True)
def woodbury(R, U, nu, b, sing_tol):
    """Solve ``(R.T R - U U.T) x = b`` using the first ``nu`` columns of U.

    Returns ``(x, ok)``; ``ok`` is False when the k x k middle matrix
    ``W.T W - I`` (``W = R^-T U``) is numerically singular.
    """
    p = R.shape[0]
    c = forward_solve(R, b)
    if nu == 0:
        return back_solve(R, c), True
    W = np.empty((p, nu))
    for j in range(nu):
        W[:, j] = forward_solve(R, np.ascontiguousarray(U[:, j]))
    M = W.T @ W
    for j in range(nu):
        M[j, j] -= 1.0
    sv = np.linalg.svd(M)[1]
    if not sv[nu - 1] > sing_tol * max(1.0, sv[0]):
        return np.zeros(p), False
    t = np.linalg.solve(M, W.T @ c)
    c = c - W @ t
    return back_solve(R, c), True


@njit(cache=True, nogil=True)
def drop_datum(R, x, mask, l2, U, nu, eps, work):
    """Remove one datum's Hessian contribution from the factor ``R``.

    ``l2`` is the K x K matrix of second derivatives of the *log-likelihood*
    sign convention (negated loss Hessian). Off-diagonal blocks are built from
    rank-1 terms on ``x_j + x_k`` with the surplus on diagonal blocks tracked in
    ``b``; pass one applies every guaranteed-positive update, pass two the
    downdates. Failed downdates are appended to ``U``. Returns the new ``nu``.
    """
    K = l2.shape[0]
    p = R.shape[0]
    b = np.zeros(K)
    v = np.empty(p)
    for q in range(2):
        for j in range(K):
            for k in range(j + 1, K):
                a = l2[j, k]
                if q == 0:
                    b[j] += a
                    b[k] += a
                if (q == 0 and a > 0.0) or (q == 1 and a < 0.0):
                    sa = math.sqrt(abs(a))
                    for c in range(p):
                        v[c] = sa * (x[c] * mask[j, c] + x[c] * mask[k, c])
                    if a > 0.0:
                        rank1_update(R, v)
                    elif not rank1_downdate(R, v, eps, work):
                        U[:, nu] = v
                        nu += 1
            a = l2[j, j] - b[j]
            if (q == 0 and a > 0.0) or (q == 1 and a < 0.0):
                sa = math.sqrt(abs(a))
                for c in range(p):
                    v[c] = sa * x[c] * mask[j, c]
                if a > 0.0:
                    rank1_update(R, v)
                elif not rank1_downdate(R, v, eps, work):
                    U[:, nu] = v
                    nu += 1
    return nu


@njit(cache=True, nogil=True)
def fold_solve(R0, X, mask, L2, ptr, idx, folds, rhs, eps, sing_tol, out, flags):
    """For each fold ``k`` in ``folds`` solve ``H_{lambda,alpha(k)} x = rhs[k]``.

    ``ptr``/``idx`` hold the dropped sets in CSR layout (sorted within fold).
    Results go to ``out[k]``; ``flags[k]`` records OK, INDEFINITE (Woodbury
    path taken) or SINGULAR (middle matrix singular, ``out[k]`` zeroed).
    """
    p = R0.shape[0]
    K = mask.shape[0]
    maxlen = 0
    for f in range(folds.shape[0]):
        k = folds[f]
        maxlen = max(maxlen, ptr[k + 1] - ptr[k])
    cap = max(1, maxlen * K * (K + 1) // 2)
    U = np.zeros((p, cap))
    work = np.zeros((p, p))
    R = np.empty_like(R0)
    for f in range(folds.shape[0]):
        k = folds[f]
        R[:, :] = R0
        nu = 0
        for t in range(ptr[k], ptr[k + 1]):
            i = idx[t]
            nu = drop_datum(R, X[i], mask, L2[i], U, nu, eps, work)
        x, ok = woodbury(R, U, nu, np.ascontiguousarray(rhs[k]), sing_tol)
        out[k, :] = x
        if not ok:
            flags[k] = SINGULAR
        elif nu > 0:
            flags[k] = INDEFINITE
        else:
            flags[k] = OK
