"""Design blocks and marginal penalties for every supported term kind.

Each term is a row tensor product of a covariate-direction basis and an
index (t) basis. A :class:`TensorTerm` keeps the two marginal pieces as
callables so the same term can be evaluated on the training rows, on a
reference grid (for constraints) or on new data (for prediction).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .basis import (
    MarginalBasis,
    PenaltyBlock,
    bspline_basis,
    clean_psd,
    constant_basis,
    difference_penalty,
    kronecker_sum_penalty,
    row_tensor,
    trapezoid_weights,
)
from .data import FunctionalDataset
from .errors import (
    BasisRangeError,
    DegenerateEigenvalue,
    DimensionMismatch,
    EmptyWindow,
    GridMismatch,
    InputError,
    MissingBasis,
    MissingCovariate,
)

TERM_KINDS = (
    "intercept_const",
    "intercept_t",
    "scalar_linear_const",
    "scalar_linear_t",
    "scalar_smooth",
    "scalar_smooth_t",
    "varying_coef_t",
    "functional_linear",
    "functional_smooth",
    "ffpc_linear",
    "ffpc_smooth",
    "random_intercept",
    "random_slope",
    "fpc_random_intercept",
)

# kinds that receive the sum-to-zero-per-t constraint unless told otherwise
CONSTRAINED_BY_DEFAULT = {
    "scalar_smooth",
    "scalar_smooth_t",
    "functional_linear",
    "functional_smooth",
    "ffpc_smooth",
}
RANDOM_KINDS = {"random_intercept", "random_slope", "fpc_random_intercept"}
CONSTANT_OVER_T = {"intercept_const", "scalar_linear_const", "scalar_smooth"}


@dataclass
class TermSpec:
    """Declarative description of one additive term.

    Basis sizes left as ``None`` are filled from :meth:`resolved`: 20 cubic
    B-splines with a first-order penalty for ``intercept_t``, five marginal
    functions otherwise, first-order penalties in t and s and second-order
    penalties in scalar-covariate and score directions.
    """

    kind: str
    covariate: Optional[str] = None
    group: Optional[str] = None
    multiplier: Optional[str] = None
    by: Optional[str] = None
    label: Optional[str] = None
    k_x: Optional[int] = None
    k_s: Optional[int] = None
    k_t: Optional[int] = None
    degree_x: int = 3
    degree_s: int = 3
    degree_t: int = 3
    order_x: Optional[int] = None
    order_s: int = 1
    order_t: int = 1
    limits: str = "full"
    constrained: Optional[bool] = None
    constant_over_t: bool = False
    precision: Optional[np.ndarray] = None
    n_components: Optional[int] = None
    threshold: float = 0.995

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise InputError(f"unknown term kind {self.kind!r}")
        if self.precision is not None:
            self.precision = clean_psd(self.precision, "group precision")

    def resolved(self):
        """Copy with all defaults filled in."""
        s = replace(self)
        if s.k_t is None:
            s.k_t = 20 if s.kind == "intercept_t" else 5
        if s.k_x is None:
            s.k_x = 5
        if s.k_s is None:
            s.k_s = 5
        if s.order_x is None:
            s.order_x = 2
        if s.constrained is None:
            s.constrained = s.kind in CONSTRAINED_BY_DEFAULT
        if s.kind in CONSTANT_OVER_T:
            s.constant_over_t = True
        if s.label is None:
            s.label = default_label(s)
        return s

    @property
    def varies_over_t(self):
        return not (self.constant_over_t or self.kind in CONSTANT_OVER_T)


def default_label(spec):
    parts = [spec.kind]
    for name in (spec.covariate, spec.multiplier, spec.group):
        if name:
            parts.append(name)
    if spec.by:
        parts.append(f"by_{spec.by}")
    return ":".join(parts)


@dataclass
class TensorTerm:
    """One additive term ``Phi_r theta_r`` evaluated on a dataset.

    ``design`` is the (constrained) design on the dataset rows. ``x_rows``
    returns the unconstrained covariate-direction basis for arbitrary
    ``(curve_index, t)`` pairs; ``t_basis`` evaluates the index basis.
    ``x_coef_basis`` evaluates the covariate-direction basis at covariate
    points, which is what coefficient functions such as ``beta(s, t)`` or
    ``b_m(t)`` are built from.
    """

    label: str
    kind: str
    spec: TermSpec
    x_rows: Callable = field(repr=False)
    t_basis: MarginalBasis = field(repr=False)
    P_x: np.ndarray = field(repr=False)
    P_t: np.ndarray = field(repr=False)
    n_curves: int = 0
    x_coef_basis: Optional[Callable] = field(default=None, repr=False)
    bases: dict = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict, repr=False)
    design: Optional[np.ndarray] = field(default=None, repr=False)
    penalties: list = field(default_factory=list, repr=False)
    constraint: Optional[object] = field(default=None, repr=False)
    coef_slice: Optional[slice] = None

    @property
    def Kx(self):
        return self.P_x.shape[0]

    @property
    def Kt(self):
        return self.P_t.shape[0]

    @property
    def n_raw_coef(self):
        return self.Kx * self.Kt

    @property
    def n_coef(self):
        return self.design.shape[1]

    @property
    def Z(self):
        return None if self.constraint is None else self.constraint.Z

    def evaluate_rows(self, curve_index, t):
        """Unconstrained design rows for the given observations."""
        curve_index = np.asarray(curve_index, dtype=int)
        t = np.asarray(t, dtype=float)
        return row_tensor(self.x_rows(curve_index, t), self.t_basis.evaluate(t))

    def constrained_rows(self, curve_index, t):
        rows = self.evaluate_rows(curve_index, t)
        return rows if self.constraint is None else rows @ self.constraint.Z

    def coef_rows(self, x_points, t):
        """Constrained rows of the coefficient function on paired points."""
        if self.x_coef_basis is None:
            raise InputError(f"term {self.label!r} has no coefficient-function basis")
        Bx = self.x_coef_basis(x_points)
        rows = row_tensor(Bx, self.t_basis.evaluate(np.asarray(t, dtype=float)))
        return rows if self.constraint is None else rows @ self.constraint.Z

    def full_coef(self, theta_r):
        """Map this term's (possibly constrained) coefficients to the raw layout."""
        return theta_r if self.constraint is None else self.constraint.Z @ theta_r


def _t_marginal(ds, spec, t_basis):
    if not spec.varies_over_t:
        return constant_basis()
    if t_basis is not None:
        return t_basis
    lo, hi = ds.t_range
    _, basis = bspline_basis([lo, hi], spec.k_t, spec.degree_t, spec.order_t, domain=(lo, hi))
    return basis


def _by_factor(ds, spec):
    if spec.by is None:
        return None
    return ds.scalar(spec.by).astype(float)


def _finish(ds, spec, x_rows, t_basis, P_x, x_coef_basis=None, bases=None, meta=None):
    """Evaluate the design on the dataset rows and attach penalties."""
    by = _by_factor(ds, spec)
    if by is not None:
        inner = x_rows

        def x_rows(ci, t, _inner=inner, _by=by):
            return _inner(ci, t) * _by[ci][:, None]

    P_x = clean_psd(np.atleast_2d(P_x), "P_x")
    P_t = t_basis.penalty
    term = TensorTerm(
        label=spec.label,
        kind=spec.kind,
        spec=spec,
        x_rows=x_rows,
        t_basis=t_basis,
        P_x=P_x,
        P_t=P_t,
        n_curves=ds.n_curves,
        x_coef_basis=x_coef_basis,
        bases=dict(bases or {}, t=t_basis),
        meta=dict(meta or {}),
    )
    term.design = term.evaluate_rows(ds.curve_index, ds.t)
    b_x, b_t = kronecker_sum_penalty(P_x, P_t)
    term.penalties = [
        replace(b, label=f"{spec.label}|{b.label}") for b in (b_x, b_t) if not b.is_zero()
    ]
    return term


def _check_range(values, basis, what):
    lo, hi = basis.domain
    tol = 1e-10 * max(hi - lo, 1.0)
    if values.size and (values.min() < lo - tol or values.max() > hi + tol):
        raise BasisRangeError(f"{what} outside basis range [{lo:.6g}, {hi:.6g}]")


def build_intercept_term(ds: FunctionalDataset, spec: TermSpec = None, t_basis=None):
    """Functional intercept ``alpha(t)`` (or a scalar intercept if constant over t)."""
    spec = (spec or TermSpec("intercept_t")).resolved()
    tb = _t_marginal(ds, spec, t_basis)
    if tb.kind == "bspline":
        _check_range(ds.t, tb, "response index t")

    def x_rows(ci, t):
        return np.ones((np.size(ci), 1))

    def x_coef(points):
        return np.ones((np.shape(points)[0], 1))

    return _finish(ds, spec, x_rows, tb, np.zeros((1, 1)), x_coef)


def build_scalar_linear_term(ds, z_name, t_basis=None, constant_over_t=False, spec=None):
    """Effects ``z delta`` and ``z delta(t)`` linear in a scalar covariate."""
    kind = "scalar_linear_const" if constant_over_t else "scalar_linear_t"
    spec = (spec or TermSpec(kind, covariate=z_name)).resolved()
    z = ds.scalar(z_name).astype(float)
    tb = _t_marginal(ds, spec, t_basis)

    def x_rows(ci, t, _z=z):
        return _z[ci][:, None]

    def x_coef(points):
        return np.asarray(points, dtype=float).reshape(-1, 1)

    return _finish(ds, spec, x_rows, tb, np.zeros((1, 1)), x_coef)


def build_scalar_smooth_term(ds, z_name, z_basis=None, t_basis=None, multiplier=None, spec=None):
    """Smooth effect ``gamma(z[, t])``, optionally times a covariate ``z2``.

    With ``multiplier`` this is the varying coefficient ``z2 * gamma(z, t)``.
    """
    if spec is None:
        kind = "varying_coef_t" if multiplier else "scalar_smooth_t"
        spec = TermSpec(kind, covariate=z_name, multiplier=multiplier)
    spec = spec.resolved()
    multiplier = spec.multiplier if multiplier is None else multiplier
    z = ds.scalar(z_name).astype(float)
    if z_basis is None:
        _, z_basis = bspline_basis(z, spec.k_x, spec.degree_x, spec.order_x)
    _check_range(z, z_basis, f"covariate {z_name!r}")
    mult = ds.scalar(multiplier).astype(float) if multiplier else None
    tb = _t_marginal(ds, spec, t_basis)
    Bz = z_basis.evaluate(z)
    if mult is not None:
        Bz = Bz * mult[:, None]

    def x_rows(ci, t, _B=Bz):
        return _B[ci]

    def x_coef(points, _zb=z_basis):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 2 and pts.shape[1] == 2:
            return _zb.evaluate(pts[:, 0]) * pts[:, 1:2]
        return _zb.evaluate(pts.ravel())

    return _finish(ds, spec, x_rows, tb, z_basis.penalty, x_coef, bases={"x": z_basis})


def window_weights(s_grid, lower, upper):
    """Quadrature weights restricted to the windows ``[lower_j, upper_j]``.

    Each grid point owns the half-intervals to its left and right; its weight
    is the total overlap of those half-intervals with the window. A window
    covering the whole grid reproduces :func:`trapezoid_weights` exactly.
    Returns an array of shape ``(len(lower), len(s_grid))``.
    """
    s = np.asarray(s_grid, dtype=float)
    lower = np.atleast_1d(np.asarray(lower, dtype=float))[:, None]
    upper = np.atleast_1d(np.asarray(upper, dtype=float))[:, None]
    if np.any(upper < lower):
        raise EmptyWindow("integration window with upper limit below lower limit")
    if np.any(upper < s[0]) or np.any(lower > s[-1]):
        raise EmptyWindow("integration window lies outside the covariate grid")
    half = np.diff(s) / 2
    # right half-interval of point h: [s_h, s_h + d_h/2]; left: [s_h - d_{h-1}/2, s_h]
    ra, rb = s[:-1][None, :], (s[:-1] + half)[None, :]
    la, lb = (s[1:] - half)[None, :], s[1:][None, :]
    right = np.where(
        (lower <= ra) & (upper >= rb),
        half[None, :],
        np.clip(np.minimum(upper, rb) - np.maximum(lower, ra), 0.0, None),
    )
    left = np.where(
        (lower <= la) & (upper >= lb),
        half[None, :],
        np.clip(np.minimum(upper, lb) - np.maximum(lower, la), 0.0, None),
    )
    w = np.zeros((lower.shape[0], s.size))
    w[:, :-1] += right
    w[:, 1:] += left
    return w


def _limit_function(limits, s_grid):
    """Resolve an integration-limit rule into ``f(curve_index, t) -> (l, u)``."""
    lo, hi = float(s_grid[0]), float(s_grid[-1])
    if callable(limits):
        return limits
    if limits == "full":
        return None
    if limits == "historical":
        return lambda ci, t: (np.full(np.shape(t), lo), np.minimum(np.asarray(t, float), hi))
    if limits == "concurrent":
        s = np.asarray(s_grid, dtype=float)
        d = np.diff(s)
        left = np.concatenate([[0.0], d / 2])
        right = np.concatenate([d / 2, [0.0]])

        def one_cell(ci, t):
            h = np.abs(np.asarray(t, float)[:, None] - s[None, :]).argmin(axis=1)
            return s[h] - left[h], s[h] + right[h]

        return one_cell
    raise InputError(f"unknown integration limits {limits!r}")


def build_functional_linear_term(ds, x_name, s_basis=None, t_basis=None, limits="full", spec=None):
    """Linear function-on-function effect ``int x_i(s) beta(s, t) ds``.

    ``limits`` is ``"full"``, ``"historical"`` (``s <= t``), ``"concurrent"``
    (a single grid cell around ``s = t``) or a callable
    ``(curve_index, t) -> (lower, upper)`` giving observation-specific limits.
    """
    spec = (spec or TermSpec("functional_linear", covariate=x_name, limits=limits)).resolved()
    xc = ds.functional(x_name)
    if not xc.centered:
        warnings.warn(f"functional covariate {x_name!r} is not centered", stacklevel=2)
    s = xc.s_grid
    if s_basis is None:
        _, s_basis = bspline_basis(s, spec.k_s, spec.degree_s, spec.order_s)
    Phi_s = s_basis.evaluate(s)
    X = xc.values
    tb = _t_marginal(ds, spec, t_basis)
    lim = _limit_function(limits if callable(limits) else spec.limits, s)
    w = trapezoid_weights(s)

    if lim is None:
        full = np.einsum("nh,nh,hk->nk", X, np.broadcast_to(w, X.shape), Phi_s)

        def x_rows(ci, t, _full=full):
            return _full[ci]

    else:

        def x_rows(ci, t, _X=X, _lim=lim, _Phi=Phi_s, _s=s):
            lower, upper = _lim(ci, np.asarray(t, float))
            W = window_weights(_s, np.broadcast_to(lower, np.shape(t)), np.broadcast_to(upper, np.shape(t)))
            return np.einsum("nh,nh,hk->nk", _X[ci], W, _Phi)

    def x_coef(points, _sb=s_basis):
        return _sb.evaluate(np.asarray(points, dtype=float).ravel())

    meta = {"x_mean": xc.mean_curve, "s_grid": s}
    return _finish(ds, spec, x_rows, tb, s_basis.penalty, x_coef, bases={"x": s_basis}, meta=meta)


def full_limits_design(ds, x_name, s_basis, t_basis):
    """Limit-aware design evaluated with ``l = min(s)``, ``u = max(s)``."""
    s = ds.functional(x_name).s_grid
    lo, hi = s[0], s[-1]
    return build_functional_linear_term(
        ds, x_name, s_basis, t_basis,
        limits=lambda ci, t: (np.full(np.shape(t), lo), np.full(np.shape(t), hi)),
    ).design


def build_functional_smooth_term(ds, x_name, xs_basis=None, t_basis=None, spec=None):
    """Smooth function-on-function effect ``int F(x_i(s), s, t) ds``.

    ``xs_basis`` is a pair ``(x_basis, s_basis)`` of marginal bases whose row
    tensor product gives the bivariate basis over ``(x, s)``. The bivariate
    penalty is the Kronecker sum of the two marginal penalties.
    """
    spec = (spec or TermSpec("functional_smooth", covariate=x_name)).resolved()
    xc = ds.functional(x_name)
    s = xc.s_grid
    X = xc.values
    if xs_basis is None:
        _, xb = bspline_basis(X.ravel(), spec.k_x, spec.degree_x, spec.order_x)
        _, sb = bspline_basis(s, spec.k_s, spec.degree_s, spec.order_s)
    else:
        xb, sb = xs_basis
    _check_range(X.ravel(), xb, f"values of {x_name!r}")
    n, H = X.shape
    w = trapezoid_weights(s)
    Bs = sb.evaluate(s)
    Bx = xb.evaluate(X.ravel()).reshape(n, H, xb.K)
    # (w' kron I_n) Phi_s, with Phi_s rows indexed by (i, h)
    full = np.einsum("h,nha,hb->nab", w, Bx, Bs).reshape(n, xb.K * sb.K)
    P_xs = np.kron(xb.penalty, np.eye(sb.K)) + np.kron(np.eye(xb.K), sb.penalty)
    tb = _t_marginal(ds, spec, t_basis)

    def x_rows(ci, t, _full=full):
        return _full[ci]

    def x_coef(points, _xb=xb, _sb=sb):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return row_tensor(_xb.evaluate(pts[:, 0]), _sb.evaluate(pts[:, 1]))

    return _finish(
        ds, spec, x_rows, tb, P_xs, x_coef, bases={"x": xb, "s": sb}, meta={"s_grid": s}
    )


def build_ffpc_term(ds, scores, t_basis=None, smooth=False, score_basis=None, spec=None):
    """Function-on-function effect through estimated FPC scores.

    Linear: one varying coefficient ``beta_k(t)`` per score column, all
    sharing the t smoothing parameter. Smooth: ``sum_k F_k(score_k, t)`` with
    a spline basis per score and penalty ``I kron P_score``. ``score_basis``
    is a list of marginal bases (one per component) and is required when
    ``smooth`` is true.
    """
    kind = "ffpc_smooth" if smooth else "ffpc_linear"
    spec = (spec or TermSpec(kind)).resolved()
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    if scores.shape[0] != ds.n_curves:
        raise DimensionMismatch("score matrix needs one row per curve")
    tb = _t_marginal(ds, spec, t_basis)
    Kc = scores.shape[1]
    if not smooth:

        def x_rows(ci, t, _S=scores):
            return _S[ci]

        def x_coef(points):
            return np.atleast_2d(np.asarray(points, dtype=float))

        return _finish(ds, spec, x_rows, tb, np.zeros((Kc, Kc)), x_coef, meta={"scores": scores})

    if score_basis is None:
        raise MissingBasis("smooth FPC term requires a score basis")
    if len(score_basis) != Kc:
        raise DimensionMismatch("need one score basis per FPC component")
    for k, b in enumerate(score_basis):
        _check_range(scores[:, k], b, f"FPC score {k + 1}")
    blocks = np.hstack([b.evaluate(scores[:, k]) for k, b in enumerate(score_basis)])
    P_x = np.zeros((blocks.shape[1],) * 2)
    pos = 0
    for b in score_basis:
        P_x[pos:pos + b.K, pos:pos + b.K] = b.penalty
        pos += b.K

    def x_rows(ci, t, _B=blocks):
        return _B[ci]

    def x_coef(points, _bases=score_basis):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.hstack([b.evaluate(pts[:, k]) for k, b in enumerate(_bases)])

    return _finish(ds, spec, x_rows, tb, P_x, x_coef, meta={"scores": scores})


def _incidence(codes, M):
    G = np.zeros((codes.size, M))
    G[np.arange(codes.size), codes - 1] = 1.0
    return G


def build_random_effect_term(ds, g_name, slope_name=None, t_basis=None, precision=None, spec=None,
                             n_levels=None):
    """Functional random intercept ``b_g(t)`` or slope ``z b_g(t)``.

    ``precision`` is an ``M x M`` PSD matrix encoding dependence between
    levels; the identity (independent levels) is used when omitted.
    ``n_levels`` fixes ``M`` (for new data that lacks some training levels).
    """
    if spec is None:
        kind = "random_slope" if slope_name else "random_intercept"
        spec = TermSpec(kind, group=g_name, covariate=slope_name, precision=precision)
    spec = spec.resolved()
    slope_name = spec.covariate if slope_name is None else slope_name
    precision = spec.precision if precision is None else precision
    codes = ds.grouping(g_name)
    M = _level_count(codes, n_levels)
    P_x = np.eye(M) if precision is None else clean_psd(precision, "group precision")
    if P_x.shape != (M, M):
        raise DimensionMismatch(f"precision is {P_x.shape[0]}x{P_x.shape[1]} but factor has {M} levels")
    G = _incidence(codes, M)
    if slope_name:
        G = G * ds.scalar(slope_name).astype(float)[:, None]
    tb = _t_marginal(ds, spec, t_basis)

    def x_rows(ci, t, _G=G):
        return _G[ci]

    def x_coef(points, _M=M):
        return _incidence(np.asarray(points, dtype=int).ravel(), _M)

    return _finish(
        ds, spec, x_rows, tb, P_x, x_coef, bases={"n_levels": M}, meta={"n_levels": M, "codes": codes}
    )


def eigenfunction_basis(grid, eigenfunctions, eigenvalues):
    """Marginal t-basis from eigenfunctions with penalty ``diag(1/eigenvalues)``."""
    grid = np.asarray(grid, dtype=float)
    E = np.atleast_2d(np.asarray(eigenfunctions, dtype=float))
    if E.shape[0] != grid.size:
        E = E.T
    kappa = np.atleast_1d(np.asarray(eigenvalues, dtype=float))
    if E.shape != (grid.size, kappa.size):
        raise DimensionMismatch("eigenfunctions must be evaluated on the response grid")
    if np.any(kappa <= 0):
        raise DegenerateEigenvalue("all eigenvalues must be positive")

    def evaluate(t, _g=grid, _E=E):
        t = np.asarray(t, dtype=float).ravel()
        return np.column_stack([np.interp(t, _g, _E[:, k]) for k in range(_E.shape[1])])

    return MarginalBasis(
        kind="custom_columns", K=kappa.size, penalty=np.diag(1.0 / kappa), evaluator=evaluate,
        domain=(float(grid[0]), float(grid[-1])),
    )


def _level_count(codes, n_levels):
    if n_levels is None:
        return int(codes.max())
    if codes.max() > n_levels:
        raise InputError(f"grouping code {int(codes.max())} exceeds the {n_levels} known levels")
    return int(n_levels)


def build_fpc_random_intercept_term(ds, g_name, eigenfunctions, eigenvalues, spec=None, n_levels=None):
    """Functional random intercept in an eigenfunction basis.

    Requires a common response grid; ``eigenfunctions`` is ``T x K``.
    """
    spec = (spec or TermSpec("fpc_random_intercept", group=g_name)).resolved()
    grid = ds.common_grid()
    if grid is None:
        raise GridMismatch("FPC random intercepts need a common response grid")
    E = np.atleast_2d(np.asarray(eigenfunctions, dtype=float))
    if E.shape[0] != grid.size:
        raise GridMismatch("eigenfunctions are not evaluated on the response grid")
    tb = eigenfunction_basis(grid, E, eigenvalues)
    codes = ds.grouping(g_name)
    M = _level_count(codes, n_levels)
    G = _incidence(codes, M)

    def x_rows(ci, t, _G=G):
        return _G[ci]

    def x_coef(points, _M=M):
        return _incidence(np.asarray(points, dtype=int).ravel(), _M)

    return _finish(
        ds, spec, x_rows, tb, np.eye(M), x_coef, bases={"n_levels": M},
        meta={"n_levels": M, "codes": codes, "eigenfunctions": E, "eigenvalues": np.asarray(eigenvalues, float)},
    )


def build_term(ds, spec: TermSpec, bases=None, fpc=None):
    """Dispatch on ``spec.kind``.

    ``bases`` re-uses marginal bases from an earlier build (prediction on new
    data). ``fpc`` carries pre-computed FPCA objects for FPC-based terms:
    ``{"scores": ..., "score_basis": ...}`` or ``{"eigenfunctions": ...,
    "eigenvalues": ...}``.
    """
    spec = spec.resolved()
    bases = bases or {}
    tb = bases.get("t")
    kind = spec.kind
    if kind in ("intercept_t", "intercept_const"):
        return build_intercept_term(ds, spec, tb)
    if kind in ("scalar_linear_t", "scalar_linear_const"):
        if spec.covariate is None:
            raise MissingCovariate(f"{kind} needs a covariate")
        return build_scalar_linear_term(ds, spec.covariate, tb, kind == "scalar_linear_const", spec)
    if kind in ("scalar_smooth", "scalar_smooth_t", "varying_coef_t"):
        if spec.covariate is None:
            raise MissingCovariate(f"{kind} needs a covariate")
        if kind == "varying_coef_t" and not spec.multiplier:
            raise MissingCovariate("varying_coef_t needs a multiplier covariate")
        return build_scalar_smooth_term(ds, spec.covariate, bases.get("x"), tb, spec.multiplier, spec)
    if kind == "functional_linear":
        return build_functional_linear_term(ds, spec.covariate, bases.get("x"), tb, spec.limits, spec)
    if kind == "functional_smooth":
        xs = (bases["x"], bases["s"]) if "x" in bases else None
        return build_functional_smooth_term(ds, spec.covariate, xs, tb, spec)
    if kind in ("ffpc_linear", "ffpc_smooth"):
        if not fpc or "scores" not in fpc:
            raise MissingBasis(f"{kind} needs FPC scores")
        return build_ffpc_term(
            ds, fpc["scores"], tb, kind == "ffpc_smooth", fpc.get("score_basis"), spec
        )
    if kind in ("random_intercept", "random_slope"):
        if spec.group is None:
            raise MissingCovariate(f"{kind} needs a grouping factor")
        if kind == "random_slope" and spec.covariate is None:
            raise MissingCovariate("random_slope needs a slope covariate")
        return build_random_effect_term(
            ds, spec.group, spec.covariate, tb, spec.precision, spec, bases.get("n_levels")
        )
    if kind == "fpc_random_intercept":
        if not fpc or "eigenfunctions" not in fpc:
            raise MissingBasis("fpc_random_intercept needs estimated eigenfunctions")
        return build_fpc_random_intercept_term(
            ds, spec.group, fpc["eigenfunctions"], fpc["eigenvalues"], spec, bases.get("n_levels")
        )
    raise InputError(f"unknown term kind {kind!r}")
