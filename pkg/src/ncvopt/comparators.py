"""Baseline smoothness selection criteria with exact rho-gradients: GCV for
single-predictor families and the profiled restricted likelihood for the
Gaussian model. Both plug into :func:`ncvopt.optimize.minimize_nested`.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .families import Gaussian
from .fit import FittedModel, Problem


class UnsupportedFamily(ValueError):
    pass


def gcv_value(fm: FittedModel, gradient: bool = True):
    """``n D / (n - tau)^2`` with D the deviance and tau the edf.

    Returns ``(value, grad)``; ``grad`` is None unless requested.
    """
    pb = fm.problem
    if pb.K != 1:
        raise UnsupportedFamily("GCV comparator needs a single linear predictor")
    n, fam = pb.n, pb.family
    dev = fam.deviance(pb.y, fm.eta, pb.rows)
    tau = fm.edf
    value = n * dev / (n - tau) ** 2
    if not gradient:
        return value, None
    A = fm.inverse()
    F = A @ fm.H @ A
    C = A - F
    X = pb.X
    d3 = fm.derivs.d3[:, 0, 0, 0]
    xCx = np.einsum("ij,jk,ik->i", X, C, X)
    Xdb = X @ fm.dbeta  # n x M
    g_tot = pb.gradient(fm.derivs.d1)
    grad = np.empty(pb.M)
    for j in range(pb.M):
        ddev = fam.deviance_factor * g_tot @ fm.dbeta[:, j]
        dtau = np.sum(d3 * Xdb[:, j] * xCx) - 2.0 * fm.lam[j] * np.sum(F * pb.S[j])
        grad[j] = n * ddev / (n - tau) ** 2 + 2.0 * n * dev * dtau / (n - tau) ** 3
    return value, grad


class _RangeBasis:
    """Per-block orthonormal bases for the range of the summed penalties,
    fixed independently of lambda so log|S_lam|_+ is smooth in rho."""

    def __init__(self, problem: Problem):
        self.blocks = {}
        for j, pen in enumerate(problem.design.penalties):
            self.blocks.setdefault(pen.block_id, []).append(j)
        self.U = {}
        for bid, js in self.blocks.items():
            cols = problem.design.blocks[bid].cols
            Ssum = sum(problem.S[j][cols, cols] / np.linalg.norm(problem.S[j]) for j in js)
            ev, V = np.linalg.eigh(Ssum)
            keep = ev > 1e-10 * ev.max()
            self.U[bid] = (cols, V[:, keep])
        self.null_dim = problem.p - sum(U.shape[1] for _, U in self.U.values())

    def logdet(self, problem: Problem, lam):
        """``log|S_lam|_+`` and its rho-gradient."""
        total = 0.0
        grad = np.zeros(len(lam))
        for bid, js in self.blocks.items():
            cols, U = self.U[bid]
            parts = [U.T @ problem.S[j][cols, cols] @ U for j in js]
            Sb = sum(lam[j] * P for j, P in zip(js, parts))
            R = scipy.linalg.cholesky(Sb)
            total += 2.0 * np.sum(np.log(np.diag(R)))
            for j, P in zip(js, parts):
                grad[j] = lam[j] * np.trace(scipy.linalg.cho_solve((R, False), P))
        return total, grad


def reml_gaussian(fm: FittedModel, gradient: bool = True, _basis: _RangeBasis | None = None):
    """Profiled Gaussian restricted likelihood criterion (to be minimized)

    ``(n - M_p) log phi + log|X'X + S_lam| - log|S_lam|_+``

    with ``phi = (||y - X beta||^2 + beta' S_lam beta) / (n - M_p)`` and M_p
    the dimension of the penalty null space. Additive constants dropped.
    """
    pb = fm.problem
    if not isinstance(pb.family, Gaussian):
        raise UnsupportedFamily("REML comparator is implemented for the Gaussian family only")
    basis = _basis or _RangeBasis(pb)
    n, p = pb.n, pb.p
    lam = fm.lam
    Mp = basis.null_dim
    r = pb.y - fm.eta[:, 0]
    Sl = pb.penalty_matrix(lam)
    bSb = fm.beta @ Sl @ fm.beta
    phi = (r @ r + bSb) / (n - Mp)
    # X'X + S_lam = H_lam / 2 for the deviance loss
    ld_xx = fm.R0.logdet() - p * np.log(2.0)
    ld_s, dld_s = basis.logdet(pb, lam)
    value = (n - Mp) * np.log(phi) + ld_xx - ld_s
    if not gradient:
        return value, None
    grad = np.empty(pb.M)
    for j in range(pb.M):
        Sj = pb.S[j]
        tr = 2.0 * np.trace(scipy.linalg.cho_solve((fm.R0.R, False), Sj))
        grad[j] = lam[j] * (fm.beta @ Sj @ fm.beta) / phi + lam[j] * tr - dld_s[j]
    return value, grad


def reml_phi(fm: FittedModel) -> float:
    basis = _RangeBasis(fm.problem)
    pb = fm.problem
    r = pb.y - fm.eta[:, 0]
    return float((r @ r + fm.beta @ pb.penalty_matrix(fm.lam) @ fm.beta) / (pb.n - basis.null_dim))


def gcv_criterion():
    def crit(fm):
        v, g = gcv_value(fm)
        return v, g, {"criterion": "gcv", "value": v}

    return crit


def reml_criterion(problem: Problem):
    basis = _RangeBasis(problem)

    def crit(fm):
        v, g = reml_gaussian(fm, _basis=basis)
        return v, g, {"criterion": "reml", "value": v}

    return crit
