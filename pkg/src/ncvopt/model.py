"""Design matrices, difference penalties and predictor index structure for
penalized B-spline regression models.

Terms are written the way they appear in run configs::

    s(x, k=20, m=2)        cubic B-spline, order-m difference penalty
    te(x, z, k=(10, 10))   tensor product of two cubic B-spline margins
    tp(x, z, k=100)        rank-k thin-plate regression spline (isotropic)
    lin(x)                 centred linear effect
    fac(g)                 treatment-coded factor

Every linear predictor gets its own intercept column.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.distance import cdist

DEGREE = 3


class CovariateOutOfRange(ValueError):
    pass


class MissingCovariate(KeyError):
    pass


# ---------------------------------------------------------------- terms


@dataclass(frozen=True)
class Smooth:
    var: str
    k: int = 10
    m: int = 2

    def __post_init__(self):
        if self.k < self.m + 1 or self.k < DEGREE + 2:
            raise ValueError(f"s({self.var}): basis dimension k={self.k} too small")

    def label(self):
        return f"s({self.var})"


@dataclass(frozen=True)
class Tensor:
    vars: tuple
    k: tuple = (5, 5)
    m: tuple = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(self.vars))
        k = self.k if np.ndim(self.k) else (self.k, self.k)
        m = self.m if np.ndim(self.m) else (self.m, self.m)
        object.__setattr__(self, "k", tuple(int(v) for v in k))
        object.__setattr__(self, "m", tuple(int(v) for v in m))
        if len(self.vars) != 2 or len(self.k) != 2 or len(self.m) != 2:
            raise ValueError("te() takes exactly two covariates")
        for kk, mm in zip(self.k, self.m):
            if kk < mm + 1 or kk < DEGREE + 2:
                raise ValueError(f"te{self.vars}: margin dimension {kk} too small")

    def label(self):
        return f"te({','.join(self.vars)})"


@dataclass(frozen=True)
class ThinPlate:
    vars: tuple
    k: int = 30
    max_knots: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(self.vars))
        if len(self.vars) != 2:
            raise ValueError("tp() takes exactly two covariates")
        if self.k < 4:
            raise ValueError(f"{self.label()}: basis dimension k={self.k} too small")

    def label(self):
        return f"tp({','.join(self.vars)})"


@dataclass(frozen=True)
class Linear:
    var: str

    def label(self):
        return f"lin({self.var})"


@dataclass(frozen=True)
class Factor:
    var: str

    def label(self):
        return f"fac({self.var})"


_TERM_BUILDERS = {"s": Smooth, "te": Tensor, "tp": ThinPlate, "lin": Linear, "fac": Factor}


def parse_term(text: str):
    """Parse ``"s(x, k=20)"`` and friends into a term object."""
    try:
        node = ast.parse(text.strip(), mode="eval").body
    except SyntaxError as err:
        raise ValueError(f"cannot parse term {text!r}: {err.msg}") from None
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        raise ValueError(f"term {text!r} is not of the form f(...)")
    name = node.func.id
    if name not in _TERM_BUILDERS:
        raise ValueError(f"unknown term type {name!r} in {text!r}")
    args = []
    for a in node.args:
        if not isinstance(a, ast.Name):
            raise ValueError(f"covariates must be bare names in {text!r}")
        args.append(a.id)
    kwargs = {kw.arg: ast.literal_eval(kw.value) for kw in node.keywords}
    if name in ("te", "tp"):
        return _TERM_BUILDERS[name](tuple(args), **kwargs)
    if len(args) != 1:
        raise ValueError(f"{name}() takes one covariate in {text!r}")
    return _TERM_BUILDERS[name](args[0], **kwargs)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model: one list of terms per linear predictor."""

    predictors: tuple
    family: str = "gaussian"

    def __post_init__(self):
        preds = []
        for terms in self.predictors:
            if isinstance(terms, str):
                terms = [terms]
            preds.append(tuple(parse_term(t) if isinstance(t, str) else t for t in terms))
        object.__setattr__(self, "predictors", tuple(preds))

    @property
    def K(self) -> int:
        return len(self.predictors)

    def covariates(self):
        out = []
        for terms in self.predictors:
            for t in terms:
                names = t.vars if isinstance(t, (Tensor, ThinPlate)) else (t.var,)
                out.extend(n for n in names if n not in out)
        return out


# ---------------------------------------------------------------- bases


def difference_matrix(q: int, d: int) -> np.ndarray:
    """Order-``d`` difference matrix of shape ``(q - d, q)``."""
    return np.diff(np.eye(q), n=d, axis=0)


def difference_penalty(q: int, d: int) -> np.ndarray:
    D = difference_matrix(q, d)
    return D.T @ D


def make_knots(lo: float, hi: float, q: int) -> np.ndarray:
    """Equally spaced cubic knots; the basis domain is ``[lo, hi]`` padded by
    one interior spacing ``(hi - lo) / (q - 3)`` on each side."""
    if not hi > lo:
        hi = lo + 1.0
    nseg = q - DEGREE
    pad = (hi - lo) / nseg
    a, b = lo - pad, hi + pad
    h = (b - a) / nseg
    return a + h * np.arange(-DEGREE, nseg + DEGREE + 1)


def bspline_basis(x, knots) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    a, b = knots[DEGREE], knots[-DEGREE - 1]
    tol = 1e-10 * (b - a)
    if np.any(x < a - tol) or np.any(x > b + tol):
        raise CovariateOutOfRange(f"covariate outside basis domain [{a:.6g}, {b:.6g}]")
    x = np.clip(x, a, b)
    return BSpline.design_matrix(x, knots, DEGREE).toarray()


def tps_kernel(r) -> np.ndarray:
    """Thin-plate radial function ``r^2 log r`` for two dimensions, m = 2."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def tprs_setup(xz: np.ndarray, k: int, max_knots: int = 1000, seed: int = 0):
    """Rank-``k`` thin-plate regression spline.

    The kernel matrix over the knots (unique covariate points, subsampled
    to ``max_knots``) is truncated to its ``k`` largest-magnitude
    eigenvectors ``U``, and the polynomial side constraint ``T'U d = 0`` is
    absorbed. Returns the knots, the map from kernel evaluations to the
    ``k - 3`` wiggly basis columns, and the ``k x k`` penalty on
    ``[wiggly, 1, x, z]`` coefficients.
    """
    xk = np.unique(xz, axis=0)
    if len(xk) > max_knots:
        xk = xk[np.sort(np.random.default_rng(seed).choice(len(xk), max_knots, replace=False))]
    if len(xk) < k:
        raise ValueError(f"thin-plate basis with k={k} needs at least k distinct covariate points")
    E = tps_kernel(cdist(xk, xk))
    ev, V = np.linalg.eigh(E)
    order = np.argsort(-np.abs(ev))[:k]
    D, U = ev[order], V[:, order]
    T = np.column_stack([np.ones(len(xk)), xk])
    Q, _ = np.linalg.qr(U.T @ T, mode="complete")
    Zc = Q[:, 3:]
    UZ = U @ Zc
    Sw = Zc.T @ (D[:, None] * Zc)
    S = np.zeros((k, k))
    S[: k - 3, : k - 3] = 0.5 * (Sw + Sw.T)
    return xk, UZ, S


def row_tensor(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product."""
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def sum_to_zero(colsums: np.ndarray) -> np.ndarray:
    """Householder-based null-space basis Z (q x q-1) with ``colsums @ Z = 0``."""
    c = np.asarray(colsums, dtype=float)
    q = c.size
    v = c.copy()
    v[0] += np.copysign(np.linalg.norm(c), c[0] if c[0] != 0 else 1.0)
    Q = np.eye(q) - 2.0 * np.outer(v, v) / (v @ v)
    return Q[:, 1:]


# ---------------------------------------------------------------- blocks


@dataclass
class BasisBlock:
    kind: str  # bspline_cubic | tensor_bspline_2d | tprs_2d | linear | factor | intercept
    covariate_ids: tuple
    dimension: int  # unconstrained basis size q
    predictor: int
    start: int = 0
    stop: int = 0
    knots: tuple = ()
    penalty_order: tuple = ()
    Z: np.ndarray | None = None
    center: float = 0.0
    levels: tuple = ()
    label: str = ""
    tprs: tuple = ()  # (knot coordinates, kernel-to-basis map, penalty) for tprs_2d

    @property
    def cols(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def width(self) -> int:
        return self.stop - self.start

    def raw_basis(self, data, n: int) -> np.ndarray:
        if self.kind == "intercept":
            return np.ones((n, 1))
        if self.kind == "linear":
            x = np.asarray(_column(data, self.covariate_ids[0]), dtype=float)
            return (x - self.center)[:, None]
        if self.kind == "factor":
            g = np.asarray(_column(data, self.covariate_ids[0]))
            unknown = set(np.unique(g)) - set(self.levels)
            if unknown:
                raise ValueError(f"unknown levels {sorted(unknown)} for factor {self.covariate_ids[0]}")
            return np.column_stack([(g == lev).astype(float) for lev in self.levels[1:]])
        if self.kind == "bspline_cubic":
            x = _column(data, self.covariate_ids[0])
            return bspline_basis(x, self.knots[0])
        if self.kind == "tensor_bspline_2d":
            Bx = bspline_basis(_column(data, self.covariate_ids[0]), self.knots[0])
            Bz = bspline_basis(_column(data, self.covariate_ids[1]), self.knots[1])
            return row_tensor(Bx, Bz)
        if self.kind == "tprs_2d":
            x = np.asarray(_column(data, self.covariate_ids[0]), dtype=float)
            z = np.asarray(_column(data, self.covariate_ids[1]), dtype=float)
            xk, U, _ = self.tprs
            E = tps_kernel(cdist(np.column_stack([x, z]), xk))
            return np.column_stack([E @ U, np.ones(len(x)), x, z])
        raise ValueError(self.kind)

    def basis(self, data, n: int) -> np.ndarray:
        B = self.raw_basis(data, n)
        return B @ self.Z if self.Z is not None else B

    def core_penalties(self) -> list:
        """Penalties on the unconstrained basis coefficients."""
        if self.kind == "bspline_cubic":
            return [difference_penalty(self.dimension, self.penalty_order[0])]
        if self.kind == "tprs_2d":
            return [self.tprs[2]]
        if self.kind == "tensor_bspline_2d":
            qx = len(self.knots[0]) - DEGREE - 1
            qz = len(self.knots[1]) - DEGREE - 1
            Sx = difference_penalty(qx, self.penalty_order[0])
            Sz = difference_penalty(qz, self.penalty_order[1])
            return [np.kron(Sx, np.eye(qz)), np.kron(np.eye(qx), Sz)]
        return []


def _column(data, name):
    try:
        return np.asarray(data[name])
    except (KeyError, IndexError, ValueError):
        raise MissingCovariate(name) from None


@dataclass
class PenaltyMatrix:
    """Penalty ``beta.T S beta`` embedded at the block's coefficients."""

    S: np.ndarray
    block_id: int
    null_dim: int
    label: str = ""


@dataclass
class Design:
    """A built model: model matrix, blocks, penalties and predictor columns."""

    spec: ModelSpec
    X: np.ndarray
    blocks: list
    penalties: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def M(self) -> int:
        return len(self.penalties)

    @property
    def predictor_cols(self) -> list:
        cols = [[] for _ in range(self.K)]
        for b in self.blocks:
            cols[b.predictor].extend(range(b.start, b.stop))
        return [np.array(sorted(c), dtype=int) for c in cols]

    @property
    def mask(self) -> np.ndarray:
        """K x p indicator of which columns enter each predictor."""
        m = np.zeros((self.K, self.p))
        for k, J in enumerate(self.predictor_cols):
            m[k, J] = 1.0
        return m

    @property
    def intercept_cols(self) -> list:
        return [b.start for b in self.blocks if b.kind == "intercept"]

    def model_matrix(self, data) -> np.ndarray:
        """Model matrix for new covariate values using the fitted bases."""
        n = _nrows(data, self.spec.covariates())
        X = np.zeros((n, self.p))
        for b in self.blocks:
            X[:, b.cols] = b.basis(data, n)
        return X

    def column_names(self) -> list:
        names = []
        for b in self.blocks:
            pre = f"eta{b.predictor + 1}:"
            if b.width == 1:
                names.append(pre + b.label)
            elif b.kind == "factor":
                names.extend(f"{pre}{b.label}[{lev}]" for lev in b.levels[1:])
            else:
                names.extend(f"{pre}{b.label}.{j + 1}" for j in range(b.width))
        return names


def _nrows(data, names) -> int:
    for nm in names:
        return len(_column(data, nm))
    raise ValueError("cannot determine number of rows")


def build_design(spec: ModelSpec, data, n: int | None = None) -> Design:
    """Evaluate every term's basis at the data and absorb identifiability
    constraints.

    Smooth blocks get a sum-to-zero constraint absorbed by a Householder
    reflection (one column dropped); linear terms are centred; factors use
    treatment coding. Each predictor starts with an intercept column.
    """
    if n is None:
        n = _nrows(data, spec.covariates()) if spec.covariates() else None
        if n is None:
            raise ValueError("n required for intercept-only models")
    for name in spec.covariates():
        _column(data, name)
    blocks = []
    start = 0
    for kp, terms in enumerate(spec.predictors):
        blk = BasisBlock("intercept", (), 1, kp, label="(Intercept)")
        blk.start, blk.stop = start, start + 1
        start += 1
        blocks.append(blk)
        for t in terms:
            blk = _make_block(t, kp, data)
            blk.start = start
            blk.stop = start + blk.basis(data, n).shape[1]
            start = blk.stop
            blocks.append(blk)
    X = np.zeros((n, start))
    for b in blocks:
        X[:, b.cols] = b.basis(data, n)
    design = Design(spec, X, blocks)
    design.penalties = build_penalties(design)
    return design


def _make_block(t, kp, data) -> BasisBlock:
    if isinstance(t, Linear):
        x = np.asarray(_column(data, t.var), dtype=float)
        return BasisBlock("linear", (t.var,), 1, kp, center=float(x.mean()), label=t.label())
    if isinstance(t, Factor):
        g = np.asarray(_column(data, t.var))
        levels = tuple(np.unique(g).tolist())
        if len(levels) < 2:
            raise ValueError(f"factor {t.var} needs at least two levels")
        return BasisBlock("factor", (t.var,), len(levels) - 1, kp, levels=levels, label=t.label())
    if isinstance(t, Smooth):
        x = np.asarray(_column(data, t.var), dtype=float)
        knots = make_knots(x.min(), x.max(), t.k)
        blk = BasisBlock("bspline_cubic", (t.var,), t.k, kp, knots=(knots,), penalty_order=(t.m,), label=t.label())
    elif isinstance(t, ThinPlate):
        x = np.asarray(_column(data, t.vars[0]), dtype=float)
        z = np.asarray(_column(data, t.vars[1]), dtype=float)
        tp = tprs_setup(np.column_stack([x, z]), t.k, t.max_knots)
        blk = BasisBlock("tprs_2d", t.vars, t.k, kp, tprs=tp, label=t.label())
    else:
        x = np.asarray(_column(data, t.vars[0]), dtype=float)
        z = np.asarray(_column(data, t.vars[1]), dtype=float)
        knots = (make_knots(x.min(), x.max(), t.k[0]), make_knots(z.min(), z.max(), t.k[1]))
        blk = BasisBlock(
            "tensor_bspline_2d", t.vars, t.k[0] * t.k[1], kp, knots=knots, penalty_order=t.m, label=t.label()
        )
    B = blk.raw_basis(data, len(x))
    blk.Z = sum_to_zero(B.sum(axis=0))
    return blk


def build_penalties(design: Design) -> list:
    """Embedded penalty matrices, one per smoothing parameter.

    Univariate smooths get ``D.T D`` for the order-m difference matrix D;
    tensor smooths get one Kronecker-embedded penalty per margin.
    """
    out = []
    p = design.p
    for bid, b in enumerate(design.blocks):
        for j, core in enumerate(b.core_penalties()):
            ev = np.linalg.eigvalsh(core)
            null_dim = int(np.sum(ev <= 1e-10 * ev.max()))
            Sb = b.Z.T @ core @ b.Z
            Sb = 0.5 * (Sb + Sb.T)
            S = np.zeros((p, p))
            S[b.cols, b.cols] = Sb
            suffix = "" if b.kind != "tensor_bspline_2d" else f"[{b.covariate_ids[j]}]"
            out.append(PenaltyMatrix(S, bid, null_dim, label=b.label + suffix))
    return out


def predict_linear(design: Design, X, beta) -> np.ndarray:
    """n x K matrix of linear predictors ``eta[i, k] = X[i, J_k] @ beta[J_k]``."""
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    cols = design.predictor_cols
    return np.column_stack([X[:, J] @ beta[J] for J in cols])
