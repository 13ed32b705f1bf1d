"""Per-datum loss families with derivatives w.r.t. each linear predictor up to
third order.

Every family evaluates vectorised over data: ``eta`` is ``(n, K)`` and
:meth:`Family.derivs` returns the loss and its first three partials with
shapes ``(n,)``, ``(n, K)``, ``(n, K, K)`` and ``(n, K, K, K)``. Infinite
losses (e.g. a Poisson identity-link mean below zero) are returned in-band
with ``finite`` False; nothing raises.

Loss scales: the Gaussian family uses the deviance ``(y - mu)^2`` so the
penalized fit reduces to ordinary penalized least squares; the other
likelihood families use the full negative log likelihood; ELF is not a
likelihood at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, xlogy

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class LossDerivs:
    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    finite: np.ndarray


@dataclass
class LossEval:
    value: float
    grad: np.ndarray
    hess: np.ndarray
    third: np.ndarray
    finite: bool


class Family:
    """Base class. Single-predictor families implement :meth:`_scalar`."""

    name = "family"
    K = 1
    finite_everywhere = True
    likelihood = True
    deviance_factor = 2.0

    def _scalar(self, y, eta, idx):
        raise NotImplementedError

    def derivs(self, y, eta, idx=None) -> LossDerivs:
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float).reshape(y.shape[0], self.K)
        with np.errstate(all="ignore"):
            v, d1, d2, d3 = self._scalar(y, eta[:, 0], idx)
        finite = np.isfinite(v)
        return LossDerivs(v, d1[:, None], d2[:, None, None], d3[:, None, None, None], finite)

    def value(self, y, eta, idx=None) -> np.ndarray:
        return self.derivs(y, eta, idx).value

    def mean(self, eta) -> np.ndarray:
        """Response-scale location implied by the first linear predictor."""
        return np.asarray(eta, dtype=float).reshape(-1, self.K)[:, 0]

    def residual(self, y, eta, idx=None) -> np.ndarray:
        return np.asarray(y, dtype=float) - self.mean(eta)

    def saturated(self, y) -> np.ndarray:
        return np.zeros(np.shape(y))

    def deviance(self, y, eta, idx=None) -> float:
        v = self.value(y, eta, idx)
        return float(self.deviance_factor * np.sum(v - self.saturated(y)))

    def initial_eta(self, y) -> np.ndarray:
        raise NotImplementedError

    def dispersion(self, y, eta, edf) -> float:
        return 1.0

    def posterior_scale(self, y, eta, edf) -> float:
        """Multiplier turning the inverse penalized Hessian into the usual
        large-sample Bayesian posterior covariance."""
        return 1.0

    def params(self) -> dict:
        return {}


class Gaussian(Family):
    name = "gaussian"
    deviance_factor = 1.0

    def _scalar(self, y, eta, idx):
        r = y - eta
        one = np.ones_like(r)
        return r * r, -2.0 * r, 2.0 * one, 0.0 * one

    def initial_eta(self, y):
        return np.array([np.mean(y)])

    def dispersion(self, y, eta, edf):
        r = self.residual(y, eta)
        return float(r @ r / max(len(r) - edf, 1.0))

    def posterior_scale(self, y, eta, edf):
        # deviance (y - mu)^2 has Hessian 2 X'X, so phi (X'X + S)^-1 = 2 phi H^-1
        return 2.0 * self.dispersion(y, eta, edf)


class Poisson(Family):
    name = "poisson"

    def __init__(self, link: str = "log"):
        if link not in ("log", "identity"):
            raise ValueError(f"unsupported Poisson link {link!r}")
        self.link = link
        self.finite_everywhere = link == "log"

    def _scalar(self, y, eta, idx):
        c = gammaln(y + 1.0)
        if self.link == "log":
            mu = np.exp(eta)
            return mu - y * eta + c, mu - y, mu, mu
        mu = eta
        ok = mu > 0
        v = np.where(ok, mu - xlogy(y, np.where(ok, mu, 1.0)) + c, np.inf)
        d1 = np.where(ok, 1.0 - y / mu, np.nan)
        d2 = np.where(ok, y / mu**2, np.nan)
        d3 = np.where(ok, -2.0 * y / mu**3, np.nan)
        return v, d1, d2, d3

    def mean(self, eta):
        e = super().mean(eta)
        return np.exp(e) if self.link == "log" else e

    def saturated(self, y):
        y = np.asarray(y, dtype=float)
        return y - xlogy(y, y) + gammaln(y + 1.0)

    def initial_eta(self, y):
        m = max(float(np.mean(y)), 1e-3)
        return np.array([np.log(m) if self.link == "log" else m])

    def params(self):
        return {"link": self.link}


class Gamma(Family):
    """Gamma with log link and fixed scale ``phi`` (shape ``1/phi``)."""

    name = "gamma"

    def __init__(self, phi: float = 1.0):
        if not phi > 0:
            raise ValueError("gamma scale phi must be positive")
        self.phi = float(phi)

    def _scalar(self, y, eta, idx):
        k = 1.0 / self.phi
        ye = y * np.exp(-eta)
        c = k * np.log(self.phi) - (k - 1.0) * np.log(y) + gammaln(k)
        return k * (ye + eta) + c, k * (1.0 - ye), k * ye, -k * ye

    def mean(self, eta):
        return np.exp(super().mean(eta))

    def saturated(self, y):
        y = np.asarray(y, dtype=float)
        k = 1.0 / self.phi
        return k * (1.0 + np.log(y)) + k * np.log(self.phi) - (k - 1.0) * np.log(y) + gammaln(k)

    def initial_eta(self, y):
        return np.array([np.log(np.mean(y))])

    def dispersion(self, y, eta, edf):
        mu = self.mean(eta)
        r = (np.asarray(y) - mu) / mu
        return float(r @ r / max(len(r) - edf, 1.0))

    def params(self):
        return {"phi": self.phi}


class GaussianLS(Family):
    """Gaussian location-scale: ``mu = eta1``, ``sigma = exp(eta2)``,
    loss ``-log N(y; mu, sigma^2)``."""

    name = "gaussian_ls"
    K = 2

    def derivs(self, y, eta, idx=None):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float).reshape(y.shape[0], 2)
        r = y - eta[:, 0]
        n = y.shape[0]
        # rejected line-search trials can overflow; the loss is then inf
        with np.errstate(over="ignore", invalid="ignore"):
            return self._derivs(r, eta, n)

    def _derivs(self, r, eta, n):
        w = np.exp(-2.0 * eta[:, 1])
        v = 0.5 * LOG_2PI + eta[:, 1] + 0.5 * r * r * w
        d1 = np.column_stack([-r * w, 1.0 - r * r * w])
        d2 = np.empty((n, 2, 2))
        d2[:, 0, 0] = w
        d2[:, 0, 1] = d2[:, 1, 0] = 2.0 * r * w
        d2[:, 1, 1] = 2.0 * r * r * w
        d3 = np.empty((n, 2, 2, 2))
        d3[:, 0, 0, 0] = 0.0
        d3[:, 0, 0, 1] = d3[:, 0, 1, 0] = d3[:, 1, 0, 0] = -2.0 * w
        d3[:, 0, 1, 1] = d3[:, 1, 0, 1] = d3[:, 1, 1, 0] = -4.0 * r * w
        d3[:, 1, 1, 1] = -4.0 * r * r * w
        v = np.where(np.isnan(v), np.inf, v)
        return LossDerivs(v, d1, d2, d3, np.isfinite(v))

    def residual(self, y, eta, idx=None):
        eta = np.asarray(eta, dtype=float).reshape(-1, 2)
        return (np.asarray(y, dtype=float) - eta[:, 0]) * np.exp(-eta[:, 1])

    def saturated(self, y):
        return np.full(np.shape(y), -np.inf)

    def initial_eta(self, y):
        return np.array([np.mean(y), np.log(np.std(y) + 1e-12)])


class ELF(Family):
    """Extended log-F loss targeting the ``tau`` quantile ``q = eta``:

    ``(tau - 1) u + lam * log(1 + exp(u / lam))`` with ``u = (y - q) / sigma``.
    """

    name = "elf"
    likelihood = False
    deviance_factor = 1.0

    def __init__(self, tau: float, sigma=1.0, lam: float = 1.0):
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not lam > 0:
            raise ValueError("ELF smoothing lam must be positive")
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        self.tau = float(tau)
        self.sigma = sigma
        self.lam = float(lam)

    def _sigma(self, idx, n):
        if self.sigma.ndim == 0:
            return np.full(n, float(self.sigma))
        return self.sigma if idx is None else self.sigma[idx]

    def _scalar(self, y, eta, idx):
        s = self._sigma(idx, y.shape[0])
        lam = self.lam
        u = (y - eta) / s
        pi = expit(u / lam)
        v = (self.tau - 1.0) * u + lam * np.logaddexp(0.0, u / lam)
        d1 = -((self.tau - 1.0) + pi) / s
        g = pi * expit(-u / lam)
        d2 = g / (lam * s * s)
        d3 = -(1.0 - 2.0 * pi) * g / (lam * lam * s**3)
        return v, d1, d2, d3

    def residual(self, y, eta, idx=None):
        # smooth score residual, the ELF analogue of tau - 1(y < q)
        s = self._sigma(idx, np.shape(y)[0])
        u = (np.asarray(y, dtype=float) - self.mean(eta)) / s
        return self.tau - 1.0 + expit(u / self.lam)

    def initial_eta(self, y):
        return np.array([np.quantile(y, self.tau)])

    def params(self):
        return {"tau": self.tau, "lam": self.lam}


def gaussian() -> Gaussian:
    return Gaussian()


def gaussian_ls_family() -> GaussianLS:
    return GaussianLS()


def elf_family(tau: float, sigma=1.0, lam: float = 1.0) -> ELF:
    return ELF(tau, sigma, lam)


def make_family(name: str, **params) -> Family:
    """Family by config name: gaussian, poisson, gamma, gaussian_ls, elf."""
    name = name.lower()
    if name == "gaussian":
        return Gaussian(**params)
    if name == "poisson":
        return Poisson(**params)
    if name == "gamma":
        return Gamma(**params)
    if name in ("gaussian_ls", "gaulss"):
        return GaussianLS(**params)
    if name == "elf":
        return ELF(**params)
    raise ValueError(f"unknown family {name!r}")


def loss_eval(family: Family, y_i: float, eta_i, i: int | None = None) -> LossEval:
    """Loss and derivatives for a single datum."""
    eta_i = np.atleast_1d(np.asarray(eta_i, dtype=float)).reshape(1, family.K)
    idx = None if i is None else np.array([i])
    d = family.derivs(np.array([y_i], dtype=float), eta_i, idx)
    return LossEval(float(d.value[0]), d.d1[0], d.d2[0], d.d3[0], bool(d.finite[0]))
