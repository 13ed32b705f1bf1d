"""Outer BFGS over log smoothing parameters with a strong-Wolfe line search,
nested around the inner Newton fit.

Components whose smoothing parameter has no effect on the fit (the
``dbeta_j' H_lam dbeta_j`` curvature test) and a negligible gradient are
frozen for the iteration: their step element is set to zero, which keeps
the step a descent direction.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernels import SINGULAR
from .fit import FittedModel, Problem, fit_inner
from .ncv import NcvResult, SingularFold, ncv
from .schemes import NeighbourhoodScheme

log = logging.getLogger(__name__)

RHO_BOUND = 20.0
MAX_STEP = 5.0


class LineSearchFailure(RuntimeError):
    pass


@dataclass
class OptimizerSettings:
    max_iter: int = 100
    grad_tol: float = 1e-6
    freeze_curv: float = 1e-8
    freeze_grad: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 40
    rho_bound: float = RHO_BOUND
    max_step: float = MAX_STEP


@dataclass
class OuterState:
    rho: np.ndarray
    B: np.ndarray
    V: float
    grad: np.ndarray
    frozen: np.ndarray
    iter: int = 0
    history: list = field(default_factory=list)
    converged: bool = False
    line_search_failed: bool = False
    at_bound: np.ndarray | None = None
    message: str = ""
    n_evals: int = 0
    seconds: float = 0.0


@dataclass
class OptimResult:
    fm: FittedModel
    criterion: object  # NcvResult for NCV, a dict for comparators
    state: OuterState


# a criterion maps a fitted model to (value, gradient, payload)
Criterion = Callable[[FittedModel], tuple]


def ncv_criterion(scheme: NeighbourhoodScheme, variant="plain", gamma=1.0, threads=1) -> Criterion:
    """NCV as an outer criterion.

    Folds found singular at the first evaluation stay excluded throughout.
    A later trial point that makes any other fold singular is reported as
    non-finite, so the line search backs away from it instead of
    profiting from a smaller sum.
    """
    excluded = []

    def crit(fm):
        try:
            r = ncv(fm, scheme, variant, gamma, gradient=True, threads=threads)
        except SingularFold:
            return np.inf, np.full(fm.problem.M, np.nan), None
        sing = r.flags == SINGULAR
        if not excluded:
            excluded.append(sing)
        elif np.any(sing & ~excluded[0]):
            return np.inf, np.full(fm.problem.M, np.nan), r
        return r.value, r.grad_rho, r

    return crit


class NestedObjective:
    """``rho -> (V, dV/drho)`` with warm-started inner fits and a cache."""

    def __init__(self, problem: Problem, criterion: Criterion):
        self.problem = problem
        self.criterion = criterion
        self.beta = None
        self.cache = {}
        self.n_evals = 0

    def __call__(self, rho):
        rho = np.asarray(rho, dtype=float)
        key = rho.tobytes()
        if key in self.cache:
            return self.cache[key]
        self.n_evals += 1
        try:
            fm = fit_inner(self.problem, rho, warm_start=self.beta)
        except np.linalg.LinAlgError as err:
            log.debug("inner fit failed at rho=%s: %s", rho, err)
            out = (np.inf, np.full(rho.shape, np.nan), None, None)
            self.cache[key] = out
            return out
        value, grad, payload = self.criterion(fm)
        if np.isfinite(value) and fm.converged:
            self.beta = fm.beta
        out = (float(value), np.asarray(grad, dtype=float), fm, payload)
        if len(self.cache) > 64:
            self.cache.clear()
        self.cache[key] = out
        return out


def default_rho0(problem: Problem) -> np.ndarray:
    """Balance penalty and data curvature: ``lambda_j tr(S_j) = tr(H_block)``."""
    if problem.M == 0:
        return np.zeros(0)
    fm = fit_inner(problem, np.zeros(problem.M))
    rho = np.zeros(problem.M)
    for j, pen in enumerate(problem.design.penalties):
        cols = problem.design.blocks[pen.block_id].cols
        tH = np.trace(fm.H[cols, cols])
        tS = np.trace(pen.S)
        if tH > 0 and tS > 0:
            rho[j] = np.log(tH / tS)
    return np.clip(rho, -RHO_BOUND + 1, RHO_BOUND - 1)


def _zoom(phi, lo, hi, f0, d0, c1, c2, budget):
    """Strong-Wolfe zoom between bracket points ``(a, f, d, aux)``; ``lo``
    always satisfies sufficient decrease."""
    for _ in range(budget):
        a = _cubic_min(lo, hi)
        f, d, aux = phi(a)
        if not np.isfinite(f) or f > f0 + c1 * a * d0 or f >= lo[1]:
            hi = (a, f, d, aux)
            continue
        if abs(d) <= -c2 * d0:
            return a, f, aux, True
        if d * (hi[0] - lo[0]) >= 0:
            hi = lo
        lo = (a, f, d, aux)
    return lo[0], lo[1], lo[3], False


def _cubic_min(lo, hi):
    """Minimizer of the cubic through both bracket ends, safeguarded to the
    inner 80% of the bracket; bisection otherwise."""
    a0, f0, d0 = lo[:3]
    a1, f1, d1 = hi[:3]
    lo_a, hi_a = min(a0, a1), max(a0, a1)
    w = hi_a - lo_a
    if np.isfinite(f1) and np.isfinite(d1) and np.isfinite(d0):
        e = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1)
        disc = e * e - d0 * d1
        if disc >= 0:
            s = np.sqrt(disc) * np.sign(a1 - a0)
            a = a1 - (a1 - a0) * (d1 + s - e) / (d1 - d0 + 2.0 * s)
            if lo_a + 0.1 * w <= a <= hi_a - 0.1 * w:
                return a
    return 0.5 * (a0 + a1)


def line_search(phi, f0, d0, amax, c1=1e-4, c2=0.9, max_trials=40):
    """Strong-Wolfe line search along ``phi(a) -> (f, dphi/da, aux)``.

    Returns ``(a, f, aux, ok)``. When the trial budget runs out the best
    point with sufficient decrease is returned with ``ok`` False; ``a = 0``
    and ``aux = None`` if there is none.
    """
    prev = (0.0, f0, d0, None)
    a = min(1.0, amax)
    for i in range(max_trials):
        f, d, aux = phi(a)
        cur = (a, f, d, aux)
        if not np.isfinite(f) or f > f0 + c1 * a * d0 or (i > 0 and f >= prev[1]):
            return _zoom(phi, prev, cur, f0, d0, c1, c2, max_trials - i - 1)
        if abs(d) <= -c2 * d0:
            return a, f, aux, True
        if d >= 0:
            return _zoom(phi, cur, prev, f0, d0, c1, c2, max_trials - i - 1)
        if a >= amax:
            return a, f, aux, True
        prev = cur
        a = min(2.0 * a, amax)
    return prev[0], prev[1], prev[3], False


def minimize_nested(
    problem: Problem,
    criterion: Criterion,
    rho0=None,
    settings: OptimizerSettings | None = None,
    trace: Callable[[dict], None] | None = None,
) -> OptimResult:
    """BFGS over ``rho`` of ``criterion(fit_inner(problem, rho))``."""
    st = settings or OptimizerSettings()
    t0 = time.perf_counter()
    obj = NestedObjective(problem, criterion)
    M = problem.M
    rho = default_rho0(problem) if rho0 is None else np.asarray(rho0, dtype=float).copy()
    bound = st.rho_bound
    rho = np.clip(rho, -bound, bound)
    V, g, fm, payload = obj(rho)
    if fm is None or not np.isfinite(V):
        raise RuntimeError("criterion not finite at the starting smoothing parameters")
    if M == 0:
        state = OuterState(rho, np.zeros((0, 0)), V, g, np.zeros(0, bool), converged=True, message="no smoothing parameters")
        return OptimResult(fm, payload, state)
    gn = np.linalg.norm(g)
    B = np.eye(M) / (gn if gn > 0 else 1.0)
    state = OuterState(rho, B, V, g, np.zeros(M, bool))

    for it in range(1, st.max_iter + 1):
        state.iter = it
        curv = np.einsum("pj,pq,qj->j", fm.dbeta, fm.H_lam, fm.dbeta)
        gtol = st.freeze_grad * (1.0 + abs(V))
        frozen = (curv < st.freeze_curv * problem.p) & (np.abs(g) < gtol)
        at_lo = (rho <= -bound) & (g > 0)
        at_hi = (rho >= bound) & (g < 0)
        blocked = frozen | at_lo | at_hi
        state.frozen, state.at_bound = frozen, at_lo | at_hi
        free_g = np.where(blocked, 0.0, g)
        rec = {
            "iter": it,
            "V": V,
            "grad_norm": float(np.max(np.abs(free_g))) if M else 0.0,
            "rho": rho.tolist(),
            "frozen": frozen.tolist(),
            "n_indefinite": getattr(payload, "n_indefinite", 0),
        }
        state.history.append(rec)
        if trace:
            trace(rec)
        if blocked.all():
            state.converged = True
            state.message = "all components frozen or at bounds"
            break
        if np.max(np.abs(free_g)) < st.grad_tol * (1.0 + abs(V)):
            state.converged = True
            state.message = "gradient tolerance reached"
            break

        step = -B @ free_g
        step[blocked] = 0.0
        if not free_g @ step < 0:
            B = np.eye(M) / max(np.linalg.norm(free_g), 1e-300)
            step = -B @ free_g
        big = np.max(np.abs(step))
        if big > st.max_step:
            step *= st.max_step / big
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(step > 0, (bound - rho) / step, np.where(step < 0, (-bound - rho) / step, np.inf))
        amax = max(float(np.min(room)), 0.0)
        if amax <= 0:
            state.message = "step blocked by bounds"
            break

        def phi(a, rho=rho, step=step):
            r = np.clip(rho + a * step, -bound, bound)
            Va, ga, fa, pa = obj(r)
            d = float(ga @ step) if np.isfinite(Va) else np.nan
            return Va, d, (r, Va, ga, fa, pa)

        a, Vn, aux, ok = line_search(phi, V, float(g @ step), amax, st.c1, st.c2, st.max_trials)
        if aux is None or a <= 0 or not Vn < V:
            state.line_search_failed = True
            state.message = "line search failed to reduce the criterion"
            log.warning("outer line search failed at iteration %d", it)
            break
        r_new, V_new, g_new, fm_new, payload_new = aux
        s = r_new - rho
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho_s = 1.0 / sy
            Id = np.eye(M)
            B = (Id - rho_s * np.outer(s, yv)) @ B @ (Id - rho_s * np.outer(yv, s)) + rho_s * np.outer(s, s)
        rho, V, g, fm, payload = r_new, V_new, g_new, fm_new, payload_new
    else:
        state.message = "iteration limit reached"

    state.rho, state.B, state.V, state.grad = rho, B, V, g
    state.n_evals = obj.n_evals
    state.seconds = time.perf_counter() - t0
    return OptimResult(fm, payload, state)


def optimize_ncv(
    problem: Problem,
    scheme: NeighbourhoodScheme,
    variant: str = "plain",
    gamma: float = 1.0,
    rho0=None,
    threads: int = 1,
    settings: OptimizerSettings | None = None,
    trace=None,
) -> OptimResult:
    """Minimize NCV over rho. ``result.criterion`` is the final NcvResult."""
    return minimize_nested(problem, ncv_criterion(scheme, variant, gamma, threads), rho0, settings, trace)


__all__ = [
    "LineSearchFailure",
    "NcvResult",
    "OptimResult",
    "OptimizerSettings",
    "OuterState",
    "default_rho0",
    "line_search",
    "minimize_nested",
    "optimize_ncv",
]
