"""Coefficient covariance estimates built from NCV fold steps, the Bayesian
bias correction, and pointwise bands for linear functionals.

Three regimes are covered: the jackknife (independent folds), the
autocorrelation-robust double sum over neighbourhoods (optionally with
cross-validated residual rescaling) plus its Bayesian bias correction, and
the usual large-sample Bayesian posterior covariance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .fit import FittedModel
from .ncv import NcvResult, fold_steps
from .schemes import NeighbourhoodScheme, make_scheme

log = logging.getLogger(__name__)

KINDS = ("jackknife", "autocorr_robust", "bayes_large_sample", "autocorr_plus_bayes_bias")


class SchemeMismatch(ValueError):
    pass


class NegativeNu(ArithmeticError):
    pass


class ZeroResidualWarning(RuntimeWarning):
    pass


class ClippedEigenvalueWarning(RuntimeWarning):
    pass


@dataclass
class CovarianceEstimate:
    V_mat: np.ndarray
    kind: str
    nu_hat: float | None = None
    scaled_by_edf: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.V_mat), 0.0))


def psd_repair(V: np.ndarray, tol: float = 1e-8):
    """Symmetrize and clip negative eigenvalues at zero.

    Returns ``(V, n_clipped)``; warns only if an eigenvalue is below
    ``-tol * max|eigenvalue|``.
    """
    V = 0.5 * (V + V.T)
    ev, Q = np.linalg.eigh(V)
    top = max(np.abs(ev).max(), 1e-300)
    neg = ev < 0
    if not neg.any():
        return V, 0
    if ev.min() < -tol * top:
        warnings.warn(
            f"covariance had {int(neg.sum())} negative eigenvalues (min {ev.min():.3g}); clipped at 0",
            ClippedEigenvalueWarning,
            stacklevel=3,
        )
    ev = np.where(neg, 0.0, ev)
    V = (Q * ev) @ Q.T
    return 0.5 * (V + V.T), int(neg.sum())


def _steps(fm, scheme, result):
    return fold_steps(fm, scheme)[0] if result is None else result.delta


def jackknife_cov(fm: FittedModel, scheme: NeighbourhoodScheme, result: NcvResult | None = None) -> CovarianceEstimate:
    """``V_J = D'D`` with rows ``Delta_k * sqrt((n - |alpha(k)|) / (n |alpha(k)|))``."""
    if not scheme.one_per_fold:
        raise SchemeMismatch("jackknife needs one predicted datum per fold (m = n, delta(k) = {k})")
    D = _steps(fm, scheme, result)
    n = scheme.n
    a = scheme.alpha_sizes.astype(float)
    Dw = D * np.sqrt((n - a) / (n * a))[:, None]
    V = Dw.T @ Dw
    return CovarianceEstimate(0.5 * (V + V.T), "jackknife")


def cv_residual_ratio(fm: FittedModel, D: np.ndarray):
    """Ratios ``e_cv / e_hat`` per datum, where row i of ``D`` is the step
    for the fold predicting datum i; 1 where ``e_hat`` is negligible."""
    pb = fm.problem
    fam = pb.family
    eta_cv = fm.eta.copy()
    for m in range(pb.K):
        eta_cv[:, m] = fm.eta[:, m] - np.einsum("ip,ip->i", pb.X * pb.mask[m], D)
    e_hat = fam.residual(pb.y, fm.eta, pb.rows)
    e_cv = fam.residual(pb.y, eta_cv, pb.rows)
    scale = max(np.std(e_hat), np.max(np.abs(e_hat)) * 1e-3, 1e-300)
    small = np.abs(e_hat) < 1e-12 * scale
    ratio = np.ones(pb.n)
    ratio[~small] = e_cv[~small] / e_hat[~small]
    if small.any():
        warnings.warn(
            f"{int(small.sum())} residuals are numerically zero; cross-validated rescaling skipped for them",
            ZeroResidualWarning,
            stacklevel=3,
        )
    return ratio, int(small.sum())


def autocorr_cov(
    fm: FittedModel,
    scheme: NeighbourhoodScheme,
    result: NcvResult | None = None,
    use_cv_residuals: bool = True,
    scaled_by_edf: bool = True,
    loo_steps: np.ndarray | None = None,
) -> CovarianceEstimate:
    """``V = sum_i Delta_i sum_{j in alpha(i)} Delta_j'``, symmetrized.

    ``Delta_i`` are leave-one-out steps, each an estimate of the influence
    of datum i; the neighbourhoods of ``scheme`` pick which cross products
    are kept. With ``use_cv_residuals`` every step (both factors) is
    rescaled by ``e_cv / e_hat``, the cross-validated residual coming from
    the fit without ``alpha(i)``; this removes the downward bias caused by
    residuals being correlated with the fit errors nearby. ``scaled_by_edf``
    applies ``n / (n - edf)``.

    Parameters
    ----------
    result : NcvResult, optional
        Output of NCV on ``scheme`` at ``fm``; its fold steps supply the
        cross-validated residuals. Recomputed if absent.
    loo_steps : ndarray (n, p), optional
        Precomputed leave-one-out steps.
    """
    if not scheme.one_per_fold:
        raise SchemeMismatch("autocorrelation-robust covariance needs m = n and delta(k) = {k}")
    if not scheme.symmetric_flag:
        raise SchemeMismatch("autocorrelation-robust covariance needs symmetric neighbourhoods")
    D_nei = _steps(fm, scheme, result)
    if loo_steps is not None:
        D = np.array(loo_steps, dtype=float)
    elif scheme.kind == "loo":
        D = D_nei.copy()
    else:
        D = fold_steps(fm, make_scheme("loo", scheme.n))[0]
    n_zero = 0
    if use_cv_residuals:
        ratio, n_zero = cv_residual_ratio(fm, D_nei)
        D *= ratio[:, None]
    AD = np.asarray(scheme.alpha_matrix() @ D)
    V = D.T @ AD
    if scaled_by_edf:
        V *= scheme.n / (scheme.n - fm.edf)
    V, n_clip = psd_repair(V)
    return CovarianceEstimate(
        V,
        "autocorr_robust",
        scaled_by_edf=scaled_by_edf,
        meta={"use_cv_residuals": use_cv_residuals, "n_zero_residual": n_zero, "n_clipped": n_clip},
    )


def bayes_cov(fm: FittedModel) -> CovarianceEstimate:
    """Large-sample Bayesian posterior covariance (scale-adjusted inverse
    penalized Hessian)."""
    pb = fm.problem
    s = pb.family.posterior_scale(pb.y, fm.eta, fm.edf)
    V = s * fm.inverse()
    return CovarianceEstimate(0.5 * (V + V.T), "bayes_large_sample", meta={"scale": s})


def bayes_bias_correct(fm: FittedModel, vhat: CovarianceEstimate, nu_method: str = "trace") -> CovarianceEstimate:
    """``vhat + (V_b - V_f) / nu`` with ``V_b = H_lam^-1``,
    ``V_f = H_lam^-1 H H_lam^-1`` and ``nu = tr(V_f) / tr(vhat)``.

    ``nu_method="logdet"`` uses ``exp((log|V_f| - log|vhat|) / p)`` instead.
    The loss scale cancels between ``V_b - V_f`` and ``nu``.
    """
    if vhat.kind != "autocorr_robust":
        raise ValueError("bias correction applies to autocorr_robust estimates")
    Vb = fm.inverse()
    Vf = Vb @ fm.H @ Vb
    Vf = 0.5 * (Vf + Vf.T)
    if nu_method == "trace":
        nu = np.trace(Vf) / np.trace(vhat.V_mat)
    elif nu_method == "logdet":
        s1, l1 = np.linalg.slogdet(Vf)
        s2, l2 = np.linalg.slogdet(vhat.V_mat)
        if s1 <= 0 or s2 <= 0:
            raise NegativeNu("log-determinant ratio needs positive definite matrices")
        nu = np.exp((l1 - l2) / Vf.shape[0])
    else:
        raise ValueError(f"unknown nu method {nu_method!r}")
    if not np.isfinite(nu) or nu <= 0:
        raise NegativeNu(f"learning rate estimate {nu} is not positive")
    V = vhat.V_mat + (Vb - Vf) / nu
    V, n_clip = psd_repair(V)
    meta = dict(vhat.meta, nu_method=nu_method, n_clipped=n_clip)
    return CovarianceEstimate(V, "autocorr_plus_bayes_bias", float(nu), vhat.scaled_by_edf, meta)


def covariance(
    fm,
    scheme,
    result=None,
    kind="autocorr_plus_bayes_bias",
    use_cv_residuals=True,
    scaled_by_edf=True,
    nu_method="trace",
) -> CovarianceEstimate:
    """Dispatch on ``kind``."""
    if kind == "jackknife":
        return jackknife_cov(fm, scheme, result)
    if kind == "bayes_large_sample":
        return bayes_cov(fm)
    vhat = autocorr_cov(fm, scheme, result, use_cv_residuals, scaled_by_edf)
    if kind == "autocorr_robust":
        return vhat
    if kind == "autocorr_plus_bayes_bias":
        return bayes_bias_correct(fm, vhat, nu_method)
    raise ValueError(f"unknown covariance kind {kind!r}")


@dataclass
class Bands:
    fit: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def pointwise_bands(beta, cov, X_pred, level: float = 0.95) -> Bands:
    """``x' beta +/- z * sqrt(x' V x)`` for each row of ``X_pred``."""
    V = cov.V_mat if isinstance(cov, CovarianceEstimate) else np.asarray(cov)
    X_pred = np.atleast_2d(np.asarray(X_pred, dtype=float))
    if X_pred.shape[1] != V.shape[0]:
        raise ValueError("X_pred columns must match the coefficient dimension")
    fit = X_pred @ np.asarray(beta)
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X_pred, V, X_pred), 0.0))
    z = norm.ppf(0.5 + level / 2.0)
    return Bands(fit, se, fit - z * se, fit + z * se, level)
