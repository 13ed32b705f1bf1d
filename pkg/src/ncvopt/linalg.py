"""Dense symmetric linear algebra: Cholesky factors, rank-1 up/downdates,
triangular solves and the Woodbury-corrected solve for indefinite downdates.

Factors are upper triangular throughout: ``R.T @ R`` reproduces the factored
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels

PIVOT_TOL = 1e-14
DOWNDATE_TOL = 1e-12
SINGULAR_TOL = 1e-10


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix to be factored is not numerically positive definite."""


class DowndateFailure(ArithmeticError):
    """A rank-1 downdate would destroy positive definiteness."""


class SingularCorrection(np.linalg.LinAlgError):
    """The Woodbury middle matrix is numerically singular."""


@dataclass(frozen=True)
class CholeskyFactor:
    """Upper-triangular factor ``R`` with ``R.T @ R = H``. Immutable."""

    R: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float, order="C")
        R.setflags(write=False)
        object.__setattr__(self, "R", R)

    @property
    def p(self) -> int:
        return self.R.shape[0]

    def matrix(self) -> np.ndarray:
        return self.R.T @ self.R

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.R))))


@dataclass(frozen=True)
class DowndateLedger:
    """A partially downdated factor plus the rank-1 terms that failed.

    Represents ``factor.R.T @ factor.R - U @ U.T``.
    """

    factor: CholeskyFactor
    U: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        if U.size == 0:
            U = np.zeros((self.factor.p, 0))
        object.__setattr__(self, "U", U)

    @property
    def failed_count(self) -> int:
        return self.U.shape[1]

    def matrix(self) -> np.ndarray:
        return self.factor.matrix() - self.U @ self.U.T


def cholesky(H) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If factorization fails or a pivot falls below ``1e-14`` times the
        largest diagonal entry of ``H``.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] < 1:
        raise ValueError("H must be a non-empty square matrix")
    try:
        R = scipy.linalg.cholesky(H, lower=False, check_finite=True)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from None
    scale = np.max(np.abs(np.diag(H)))
    if np.any(np.diag(R) ** 2 <= PIVOT_TOL * scale):
        raise NotPositiveDefinite("pivot below tolerance")
    return CholeskyFactor(R)


def chol_rank1(factor: CholeskyFactor, u, up: bool, eps: float = DOWNDATE_TOL) -> CholeskyFactor:
    """Return the factor of ``H + u u.T`` (``up``) or ``H - u u.T``.

    Updates use Givens rotations, downdates hyperbolic rotations. The input
    factor is never modified.

    Raises
    ------
    DowndateFailure
        If the downdated matrix is not numerically positive definite.
    """
    u = np.ascontiguousarray(u, dtype=float)
    if u.shape != (factor.p,):
        raise ValueError("u must have length p")
    R = factor.R.copy()
    if up:
        _kernels.rank1_update(R, u)
    elif not _kernels.rank1_downdate(R, u, eps, np.zeros_like(R)):
        raise DowndateFailure("downdate would make the matrix indefinite")
    return CholeskyFactor(R)


def downdate_sequence(factor: CholeskyFactor, vectors, eps: float = DOWNDATE_TOL) -> DowndateLedger:
    """Apply downdates for each column of ``vectors`` in order.

    Failed downdates are skipped (the pre-attempt factor kept) and collected
    as columns of the ledger's ``U``.
    """
    vectors = np.asarray(vectors, dtype=float).reshape(factor.p, -1)
    R = factor.R.copy()
    work = np.zeros_like(R)
    failed = []
    for j in range(vectors.shape[1]):
        v = np.ascontiguousarray(vectors[:, j])
        if not _kernels.rank1_downdate(R, v, eps, work):
            failed.append(v)
    U = np.column_stack(failed) if failed else np.zeros((factor.p, 0))
    return DowndateLedger(CholeskyFactor(R), U)


def tri_solve(factor: CholeskyFactor, b) -> np.ndarray:
    """Solve ``R.T R x = b`` by two triangular solves."""
    b = np.ascontiguousarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite right hand side")
    return _kernels.back_solve(factor.R, _kernels.forward_solve(factor.R, b))


def woodbury_solve(ledger: DowndateLedger, b) -> np.ndarray:
    """Solve ``(R.T R - U U.T) x = b`` at O(k p^2) cost.

    Uses ``R^-1 {I - W (W.T W - I)^-1 W.T} R^-T`` with ``W = R^-T U``.
    With no failed downdates this is exactly :func:`tri_solve`.
    """
    if ledger.failed_count == 0:
        return tri_solve(ledger.factor, b)
    b = np.ascontiguousarray(b, dtype=float)
    U = np.ascontiguousarray(ledger.U)
    x, ok = _kernels.woodbury(ledger.factor.R, U, U.shape[1], b, SINGULAR_TOL)
    if not ok:
        raise SingularCorrection("Woodbury middle matrix is singular")
    return x
