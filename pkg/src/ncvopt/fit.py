"""Inner Newton fit of the penalized loss

    sum_i D(y_i, eta_i) + sum_j lambda_j beta' S_j beta

at fixed log smoothing parameters, and the full-fit quantities NCV needs.

The penalized gradient is ``sum_i g_i + 2 sum_j lambda_j S_j beta`` and the
penalized Hessian ``H_lam = H + 2 sum_j lambda_j S_j``; implicit
differentiation of stationarity gives ``dbeta/drho_j = -2 lambda_j H_lam^-1 S_j beta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .families import Family, LossDerivs
from .linalg import CholeskyFactor, NotPositiveDefinite, cholesky, tri_solve
from .model import Design

log = logging.getLogger(__name__)

INNER_TOL = 1e-8
MAX_ITER = 200
MAX_HALVINGS = 30


class NonFiniteLoss(ValueError):
    """The penalized loss is not finite at the starting coefficients."""


@dataclass
class Problem:
    """Design, response and family bundled for repeated fitting."""

    design: Design
    y: np.ndarray
    family: Family
    rows: np.ndarray | None = None  # original row indices, for per-datum family params

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape != (self.design.n,):
            raise ValueError("response length does not match design")
        if self.family.K != self.design.K:
            raise ValueError(f"family {self.family.name} needs K={self.family.K} predictors, model has {self.design.K}")
        self.X = np.ascontiguousarray(self.design.X)
        self.mask = np.ascontiguousarray(self.design.mask)
        self.cols = self.design.predictor_cols
        self.S = [pen.S for pen in self.design.penalties]

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def p(self) -> int:
        return self.design.p

    @property
    def K(self) -> int:
        return self.design.K

    @property
    def M(self) -> int:
        return len(self.S)

    def eta(self, beta) -> np.ndarray:
        return np.column_stack([self.X[:, J] @ beta[J] for J in self.cols])

    def penalty_matrix(self, lam) -> np.ndarray:
        Sl = np.zeros((self.p, self.p))
        for lj, Sj in zip(lam, self.S):
            Sl += lj * Sj
        return Sl

    def gradient_rows(self, d1) -> np.ndarray:
        """n x p matrix of per-datum loss gradients ``g_i``."""
        G = np.zeros((self.n, self.p))
        for m, J in enumerate(self.cols):
            G[:, J] = self.X[:, J] * d1[:, m : m + 1]
        return G

    def gradient(self, d1) -> np.ndarray:
        g = np.zeros(self.p)
        for m, J in enumerate(self.cols):
            g[J] = self.X[:, J].T @ d1[:, m]
        return g

    def hessian(self, d2) -> np.ndarray:
        """``sum_i sum_{jk} D2[i,j,k] x_j(i) x_k(i)'``."""
        H = np.zeros((self.p, self.p))
        for j, Jj in enumerate(self.cols):
            for k in range(j, self.K):
                Jk = self.cols[k]
                blk = self.X[:, Jj].T @ (self.X[:, Jk] * d2[:, j, k : k + 1])
                H[np.ix_(Jj, Jk)] = blk
                if k != j:
                    H[np.ix_(Jk, Jj)] = blk.T
        return 0.5 * (H + H.T)

    def loss_derivs(self, eta) -> LossDerivs:
        return self.family.derivs(self.y, eta, self.rows)

    def penalized_loss(self, beta, Sl) -> float:
        v = self.family.value(self.y, self.eta(beta), self.rows)
        with np.errstate(over="ignore"):
            return float(np.sum(v) + beta @ Sl @ beta)

    def subset(self, keep) -> "Problem":
        """The same model restricted to rows ``keep``."""
        keep = np.asarray(keep)
        d = self.design
        sub = Design(d.spec, d.X[keep], d.blocks, d.penalties)
        rows = keep if self.rows is None else self.rows[keep]
        return Problem(sub, self.y[keep], self.family, rows)

    def initial_beta(self) -> np.ndarray:
        beta = np.zeros(self.p)
        e0 = self.family.initial_eta(self.y)
        for m, c in enumerate(self.design.intercept_cols):
            beta[c] = e0[m]
        return beta


@dataclass
class FittedModel:
    """Converged fit at ``rho`` with the quantities NCV and UQ consume."""

    problem: Problem
    rho: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    derivs: LossDerivs
    H: np.ndarray
    H_lam: np.ndarray
    R0: CholeskyFactor
    dbeta: np.ndarray
    edf: float
    converged: bool
    n_iter: int
    penalized_loss: float
    grad_norm: float
    edf_terms: list = field(default_factory=list)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.rho)

    @property
    def grads(self) -> np.ndarray:
        """n x p per-datum loss gradients at beta-hat."""
        return self.problem.gradient_rows(self.derivs.d1)

    @property
    def dbeta_drho(self) -> np.ndarray:
        return self.dbeta

    def inverse(self) -> np.ndarray:
        """Dense ``H_lam^-1``."""
        return scipy.linalg.cho_solve((self.R0.R, False), np.eye(self.problem.p))

    def dispersion(self) -> float:
        """Pearson-type scale estimate, for reporting."""
        return self.problem.family.dispersion(self.problem.y, self.eta, self.edf)


def _newton_direction(Hp, g):
    try:
        R = scipy.linalg.cholesky(Hp, lower=False)
        return scipy.linalg.cho_solve((R, False), g)
    except np.linalg.LinAlgError:
        ev, V = np.linalg.eigh(Hp)
        shift = max(0.0, -ev[0]) + 1e-8 * max(1.0, np.abs(ev).max())
        return V @ ((V.T @ g) / (ev + shift))


def fit_inner(
    problem: Problem,
    rho,
    warm_start=None,
    tol: float = INNER_TOL,
    max_iter: int = MAX_ITER,
) -> FittedModel:
    """Minimize the penalized loss over beta by Newton's method with step
    halving.

    Parameters
    ----------
    problem : Problem
    rho : array_like, shape (M,)
        Log smoothing parameters.
    warm_start : array_like, optional
        Starting coefficients. Ignored (cold start used) if the loss is not
        finite there.
    tol : float
        Stationarity tolerance: ``max|grad| < tol * (1 + max|beta|)``.

    Returns
    -------
    FittedModel
        ``converged`` is False if the iteration limit was reached or no
        step could reduce the loss before reaching the tolerance.
    """
    rho = np.asarray(rho, dtype=float).reshape(-1)
    if rho.shape != (problem.M,) or not np.all(np.isfinite(rho)):
        raise ValueError(f"rho must be a finite vector of length {problem.M}")
    lam = np.exp(rho)
    Sl = problem.penalty_matrix(lam)

    beta = None
    if warm_start is not None:
        beta = np.array(warm_start, dtype=float)
        if beta.shape != (problem.p,):
            raise ValueError("warm_start has wrong length")
        if not np.isfinite(problem.penalized_loss(beta, Sl)):
            beta = None
    if beta is None:
        beta = problem.initial_beta()
    f = problem.penalized_loss(beta, Sl)
    if not np.isfinite(f):
        raise NonFiniteLoss("penalized loss not finite at starting coefficients")

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = problem.loss_derivs(problem.eta(beta))
        g = problem.gradient(d.d1) + 2.0 * Sl @ beta
        gmax = np.max(np.abs(g))
        if gmax < tol * (1.0 + np.max(np.abs(beta))):
            converged = True
            break
        Hp = problem.hessian(d.d2) + 2.0 * Sl
        step = _newton_direction(Hp, g)
        t = 1.0
        # near the optimum loss differences sink below rounding level
        slack = 1e-11 * (1.0 + abs(f))
        for _ in range(MAX_HALVINGS + 1):
            trial = beta - t * step
            ft = problem.penalized_loss(trial, Sl)
            if np.isfinite(ft) and ft <= f + slack:
                break
            t *= 0.5
        else:
            # no decrease possible: accept if gradient is at rounding level
            converged = gmax < 1e-5 * (1.0 + abs(f)) / max(problem.n, 1) ** 0.5
            break
        beta, f = trial, ft

    if converged:
        # one polishing step makes beta-hat accurate to rounding
        d = problem.loss_derivs(problem.eta(beta))
        g = problem.gradient(d.d1) + 2.0 * Sl @ beta
        step = _newton_direction(problem.hessian(d.d2) + 2.0 * Sl, g)
        trial = beta - step
        ft = problem.penalized_loss(trial, Sl)
        if np.isfinite(ft) and ft <= f + 1e-12 * (1.0 + abs(f)):
            beta, f = trial, ft
    else:
        log.warning("inner Newton fit did not converge after %d iterations", it)

    return _assemble(problem, rho, beta, Sl, converged, it, f)


def _assemble(problem, rho, beta, Sl, converged, n_iter, f) -> FittedModel:
    lam = np.exp(rho)
    eta = problem.eta(beta)
    d = problem.loss_derivs(eta)
    H = problem.hessian(d.d2)
    H_lam = H + 2.0 * Sl
    H_lam = 0.5 * (H_lam + H_lam.T)
    g = problem.gradient(d.d1) + 2.0 * Sl @ beta
    R0 = cholesky(H_lam)
    Rt = (R0.R, False)
    if problem.M:
        rhs = np.column_stack([lam[j] * (problem.S[j] @ beta) for j in range(problem.M)])
        dbeta = -2.0 * scipy.linalg.cho_solve(Rt, rhs)
    else:
        dbeta = np.zeros((problem.p, 0))
    F = scipy.linalg.cho_solve(Rt, H)
    edf = float(np.trace(F))
    edf_terms = [float(np.trace(F[b.cols, b.cols])) for b in problem.design.blocks]
    return FittedModel(
        problem=problem,
        rho=rho.copy(),
        beta=beta,
        eta=eta,
        derivs=d,
        H=H,
        H_lam=H_lam,
        R0=R0,
        dbeta=dbeta,
        edf=edf,
        converged=converged,
        n_iter=n_iter,
        penalized_loss=f,
        grad_norm=float(np.max(np.abs(g))),
        edf_terms=edf_terms,
    )


def dbeta_drho(fm: FittedModel, j: int) -> np.ndarray:
    """``dbeta/drho_j = -2 lambda_j H_lam^-1 S_j beta``."""
    S = fm.problem.S[j]
    return -2.0 * fm.lam[j] * tri_solve(fm.R0, S @ fm.beta)


__all__ = [
    "FittedModel",
    "NonFiniteLoss",
    "NotPositiveDefinite",
    "Problem",
    "dbeta_drho",
    "fit_inner",
]
