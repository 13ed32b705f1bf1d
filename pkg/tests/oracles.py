"""Randomized oracle suites shared by the unit and acceptance tests. Each
returns the metrics the caller asserts on."""

import numpy as np

from conftest import spd
from ncvopt.linalg import DowndateFailure, DowndateLedger, chol_rank1, cholesky, woodbury_solve


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def roundtrip_suite(cases=500, seed=1):
    """Random update/downdate sequences against the dense matrix; returns
    the worst relative error of ``R'R``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        p = int(rng.integers(2, 41))
        H = spd(rng, p)
        f = cholesky(H)
        M = H.copy()
        for _ in range(int(rng.integers(1, 6))):
            u = rng.normal(size=p)
            if rng.random() < 0.5:
                f = chol_rank1(f, u, up=True)
                M = M + np.outer(u, u)
            else:
                # scale the downdate to keep the matrix comfortably SPD
                Minv_u = np.linalg.solve(M, u)
                u = u * np.sqrt(0.9 / (u @ Minv_u)) * rng.random()
                f = chol_rank1(f, u, up=False)
                M = M - np.outer(u, u)
        worst = max(worst, rel(f.matrix(), M))
    return worst


def failure_iff_eigenvalue_suite(cases=500, seed=2):
    """Downdates whose result is (not) positive definite; returns
    ``(cases, mismatches, n_indefinite)``."""
    rng = np.random.default_rng(seed)
    checked = mismatches = n_neg = 0
    while checked < cases:
        H = spd(rng, 10, shift=0.1)
        u = rng.normal(size=10) * rng.uniform(0.2, 3.0)
        lam_min = np.linalg.eigvalsh(H - np.outer(u, u))[0]
        if abs(lam_min) < 1e-6 * np.linalg.eigvalsh(H)[-1]:
            continue  # too close to the boundary to call
        try:
            chol_rank1(cholesky(H), u, up=False)
            failed = False
        except DowndateFailure:
            failed = True
        mismatches += failed != (lam_min < 0)
        n_neg += lam_min < 0
        checked += 1
    return checked, mismatches, n_neg


def woodbury_suite(cases=500, seed=3):
    """Woodbury solves of ``(H - U U') x = b`` against dense solves;
    returns ``(worst relative error, n_indefinite)``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = n_indef = 0
    while n < cases:
        p = int(rng.integers(3, 25))
        k = int(rng.integers(1, 4))
        H = spd(rng, p)
        U = rng.normal(size=(p, k)) * rng.uniform(1.0, 4.0)
        A = H - U @ U.T
        if np.linalg.cond(A) > 1e8:
            continue
        b = rng.normal(size=p)
        x = woodbury_solve(DowndateLedger(cholesky(H), U), b)
        worst = max(worst, rel(x, np.linalg.solve(A, b)))
        n_indef += np.linalg.eigvalsh(A)[0] < 0
        n += 1
    return worst, n_indef
