"""Penalized least squares, REML smoothing-parameter selection and model fitting.

The penalized criterion ``||y - X theta||^2 + sum_v lambda_v theta' P_v theta``
is the negative log-likelihood of a Gaussian mixed model in which
``theta ~ N(0, sigma^2 S_lambda^-)``. Smoothing parameters are chosen by
minimizing the restricted likelihood of that model with ``sigma^2``
profiled out; see :func:`reml_criterion`.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack
from scipy.optimize import minimize

from .errors import (
    ConflictError,
    DegenerateCovariance,
    DimensionMismatch,
    GridMismatch,
    MissingCovariate,
    NoRandomStructure,
    RankDeficient,
)

log = logging.getLogger(__name__)

LOG_LAMBDA_SPAN = 25.0
PSEUDODET_RTOL = 1e-10


@dataclass
class GlobalPenalty:
    """A term-level penalty block placed at ``sl`` in the global coefficient vector."""

    matrix: np.ndarray
    sl: slice
    label: str
    term: str

    def padded(self, K):
        P = np.zeros((K, K))
        P[self.sl, self.sl] = self.matrix
        return P


@dataclass
class DesignSystem:
    """Assembled global design ``[Phi_1 | ... | Phi_R]`` with padded penalties."""

    y: np.ndarray
    design: np.ndarray
    penalties: list
    term_slices: dict
    terms: list = field(default_factory=list, repr=False)
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        sw = None if self.weights is None else np.sqrt(self.weights)
        Xw = self.design if sw is None else self.design * sw[:, None]
        yw = self.y if sw is None else self.y * sw
        self._Xw = Xw
        self._yw = yw
        self.XtX = Xw.T @ Xw
        self.Xty = Xw.T @ yw
        self.yty = float(yw @ yw)
        self._blocks = _penalty_blocks(self.penalties, self.K)
        self._rotate()

    def _rotate(self):
        # orthogonal change of basis, per penalty block, that diagonalizes
        # commuting penalties; stiff and free directions then separate under
        # diagonal scaling of X'X + S
        Q = np.eye(self.K)
        for b in self._blocks:
            sl = b["sl"]
            Q[sl, sl] = b["basis"]
        self._Q = Q
        self._XtX_rot = Q.T @ self.XtX
        self._XtX_rot = self._XtX_rot @ Q
        self._XtX_rot = 0.5 * (self._XtX_rot + self._XtX_rot.T)
        self._Xty_rot = Q.T @ self.Xty

    def S_rotated(self, lam):
        """``Q' S_lambda Q`` in the block eigenbasis used by the solver."""
        S = np.zeros((self.K, self.K))
        for b in self._blocks:
            if b["rank"] == 0:
                continue
            a = b["sl"].start
            if b["diag"] is not None:
                i = np.arange(a, a + b["rank"])
                S[i, i] = b["diag"] @ lam[b["idx"]]
                continue
            Qb = b["basis"]
            Sb = sum(lam[v] * P for v, P in zip(b["idx"], b["mats"]))
            S[b["sl"], b["sl"]] = Qb.T @ Sb @ Qb
        return S

    @property
    def N(self):
        return self.y.size

    @property
    def K(self):
        return self.design.shape[1]

    @property
    def V(self):
        return len(self.penalties)

    @property
    def total_nullspace_dim(self):
        return self.K - sum(b["rank"] for b in self._blocks)

    def padded_penalties(self):
        return [p.padded(self.K) for p in self.penalties]

    def S(self, lam):
        S = np.zeros((self.K, self.K))
        for p, l in zip(self.penalties, lam):
            S[p.sl, p.sl] += l * p.matrix
        return S

    def log_pdet_S(self, lam):
        """Log pseudo-determinant of ``S_lambda`` over its (lambda-independent) range."""
        total = 0.0
        for b in self._blocks:
            if b["rank"] == 0:
                continue
            if b["diag"] is not None:
                d = b["diag"] @ lam[b["idx"]]
                total += np.log(d).sum()
                continue
            Sb = sum(lam[v] * P for v, P in zip(b["idx"], b["mats"]))
            R = b["U"].T @ Sb @ b["U"]
            try:
                c = sla.cholesky(R, lower=False, check_finite=False)
                total += 2.0 * np.log(np.diag(c)).sum()
            except np.linalg.LinAlgError:
                ev = np.linalg.eigvalsh(R)
                total += np.log(np.clip(ev, 1e-300, None)).sum()
        return total


def _penalty_blocks(penalties, K):
    """Group penalties by coefficient slice and find each group's range space.

    The range of ``sum_v lambda_v P_v`` does not depend on ``lambda > 0``, so
    it is computed once from scale-normalized penalties. Eigenvalues below
    ``PSEUDODET_RTOL`` of the largest count as structural zeros.
    """
    groups = {}
    for v, p in enumerate(penalties):
        key = (p.sl.start, p.sl.stop)
        groups.setdefault(key, []).append(v)
    blocks = []
    for (a, b), idx in sorted(groups.items()):
        mats = [penalties[v].matrix for v in idx]
        norm = sum(P / max(np.abs(P).max(), 1e-300) for P in mats)
        ev, U = np.linalg.eigh(norm)
        keep = ev > PSEUDODET_RTOL * max(ev.max(), 1e-300)
        null = U[:, ~keep]
        U = U[:, keep]
        diag, Qc = _common_eigenvalues(mats, U)
        blocks.append({
            "idx": np.array(idx), "mats": mats, "U": U, "rank": int(keep.sum()),
            "diag": diag, "sl": slice(a, b),
            # range directions first (in the joint eigenbasis when there is one)
            "basis": np.hstack([U if Qc is None else U @ Qc, null]),
        })
    return blocks


def _common_eigenvalues(mats, U):
    """Eigenvalues of commuting penalties in a shared eigenbasis of their range.

    Returns a ``rank x n_penalties`` matrix ``D`` with ``U' P_v U`` equal to
    ``Q diag(D[:, v]) Q'`` for one orthogonal ``Q``, or ``None`` when the
    penalties do not commute (or no such basis is found numerically). The
    pseudo-determinant then costs ``O(rank)`` per evaluation. ``Q`` is
    returned alongside (``None`` when ``D`` is).
    """
    if U.shape[1] == 0:
        return None, None
    R = [U.T @ P @ U for P in mats]
    scale = [max(np.abs(r).max(), 1e-300) for r in R]
    for a in range(len(R)):
        for b in range(a + 1, len(R)):
            if np.abs(R[a] @ R[b] - R[b] @ R[a]).max() > 1e-10 * scale[a] * scale[b]:
                return None, None
    # generic combination separates the joint eigenspaces
    weights = np.exp(np.linspace(0.0, 1.0, len(R)) * np.pi / 3)
    _, Q = np.linalg.eigh(sum(w * r / s for w, r, s in zip(weights, R, scale)))
    D = np.column_stack([np.einsum("ij,ik,kj->j", Q, r, Q) for r in R])
    for r, d in zip(R, D.T):
        if np.abs(Q.T @ r @ Q - np.diag(d)).max() > 1e-8 * max(np.abs(r).max(), 1e-300):
            return None, None
    D = np.clip(D, 0.0, None)
    if np.any(D.sum(axis=1) <= 0):
        return None, None
    return D, Q


def assemble_model(terms, y, weights=None) -> DesignSystem:
    """Concatenate term designs and pad their penalties into global coordinates.

    Smoothing indices ``0..V-1`` are assigned in term order; the term objects
    get their ``coef_slice`` set.
    """
    y = np.asarray(y, dtype=float).ravel()
    if not terms:
        raise DimensionMismatch("model has no terms")
    for t in terms:
        if t.design.shape[0] != y.size:
            raise DimensionMismatch(
                f"term {t.label!r} has {t.design.shape[0]} rows, response has {y.size}"
            )
    designs, penalties, slices = [], [], {}
    pos = 0
    for t in terms:
        k = t.design.shape[1]
        sl = slice(pos, pos + k)
        t.coef_slice = sl
        slices[t.label] = sl
        designs.append(t.design)
        for p in t.penalties:
            p.smoothing_index = len(penalties)
            penalties.append(GlobalPenalty(p.matrix, sl, p.label, t.label))
        pos += k
    return DesignSystem(y, np.hstack(designs), penalties, slices, list(terms), weights)


@dataclass
class _Factor:
    """Factorization of the penalized normal matrix ``A = X'X + S``."""

    A: np.ndarray
    rank: int
    logdet: float
    chol: Optional[np.ndarray] = None
    piv: Optional[np.ndarray] = None
    evals: Optional[np.ndarray] = None
    evecs: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    @property
    def null_directions(self):
        if self.evecs is None:
            return np.zeros((self.A.shape[0], 0))
        return self.evecs[:, self.evals <= 0]

    def solve(self, b):
        d = self.scale if b.ndim == 1 else self.scale[:, None]
        return d * self._solve_scaled(d * b)

    def _solve_scaled(self, b):
        if self.chol is not None:
            bp = b[self.piv]
            z = sla.solve_triangular(self.chol, bp, trans="T", lower=False, check_finite=False)
            x = sla.solve_triangular(self.chol, z, lower=False, check_finite=False)
            out = np.empty_like(x)
            out[self.piv] = x
            return out
        inv = np.where(self.evals > 0, 1.0 / np.where(self.evals > 0, self.evals, 1.0), 0.0)
        if b.ndim == 1:
            return self.evecs @ (inv * (self.evecs.T @ b))
        return self.evecs @ (inv[:, None] * (self.evecs.T @ b))

    def inverse(self):
        return self.solve(np.eye(self.A.shape[0]))


def _factor(A):
    """Pivoted Cholesky with an eigen fallback for rank-deficient systems.

    ``A`` is first scaled to unit diagonal, which keeps the factorization
    accurate when smoothing parameters differ by many orders of magnitude.
    If the scaled matrix is rank deficient, the generalized inverse of the
    unscaled matrix discards the unidentified directions, which gives the
    minimum-norm solution.
    """
    K = A.shape[0]
    diag = np.diag(A).copy()
    pos = diag > 0
    scale = np.ones(K)
    scale[pos] = 1.0 / np.sqrt(diag[pos])
    As = A * np.outer(scale, scale)
    shift = -2.0 * np.log(scale).sum()
    c, piv, rank, info = lapack.dpstrf(As, lower=0)
    if info == 0 and rank == K:
        U = np.triu(c)
        return _Factor(A=A, rank=K, logdet=2.0 * np.log(np.diag(U)).sum() + shift,
                       chol=U, piv=piv - 1, scale=scale)
    ev, V = np.linalg.eigh(A)
    tol = K * np.finfo(float).eps * max(ev.max(), 1e-300) * 10
    keep = ev > tol
    evals = np.where(keep, ev, 0.0)
    return _Factor(A=A, rank=int(keep.sum()), logdet=float(np.log(ev[keep]).sum()),
                   evals=evals, evecs=V, scale=np.ones(K))


@dataclass
class PenalizedFit:
    theta: np.ndarray
    fitted: np.ndarray
    rss: float
    penalty: float
    edf: float
    edf_terms: dict
    sigma2: float
    A_inv: np.ndarray = field(repr=False)
    null_directions: np.ndarray = field(repr=False)
    system: DesignSystem = field(repr=False)

    @property
    def hat_diagonal(self):
        X = self.system._Xw
        return np.einsum("ij,ij->i", X @ self.A_inv, X)


def _solve(system, lam):
    """Solve in the rotated basis; returns the factor there and ``theta`` in the original one."""
    Sr = system.S_rotated(lam)
    f = _factor(system._XtX_rot + Sr)
    theta_r = f.solve(system._Xty_rot)
    theta = system._Q @ theta_r
    r = system._yw - system._Xw @ theta
    return f, theta, float(r @ r), float(theta_r @ Sr @ theta_r)


def fit_penalized(system: DesignSystem, lam, policy="min_norm") -> PenalizedFit:
    """Penalized least squares for fixed smoothing parameters.

    ``policy="min_norm"`` returns the minimum-norm solution when the system
    is singular (recording the null directions); ``policy="raise"`` raises
    :class:`RankDeficient` instead.
    """
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.size != system.V:
        raise DimensionMismatch(f"expected {system.V} smoothing parameters, got {lam.size}")
    if np.any(lam <= 0):
        raise ValueError("smoothing parameters must be positive")
    f, theta, rss, penalty = _solve(system, lam)
    Q = system._Q
    nulls = Q @ f.null_directions
    if nulls.shape[1]:
        if policy == "raise":
            raise RankDeficient(f"{nulls.shape[1]} unidentified coefficient directions", nulls)
        warnings.warn(
            f"{nulls.shape[1]} unidentified coefficient directions set to zero", stacklevel=2
        )
    A_inv = Q @ f.inverse() @ Q.T
    A_inv = 0.5 * (A_inv + A_inv.T)
    F = A_inv @ system.XtX
    edf_diag = np.diag(F)
    edf = float(edf_diag.sum())
    edf_terms = {lab: float(edf_diag[sl].sum()) for lab, sl in system.term_slices.items()}
    dof = max(system.N - edf, 1e-8)
    return PenalizedFit(
        theta=theta,
        fitted=system.design @ theta,
        rss=rss,
        penalty=penalty,
        edf=edf,
        edf_terms=edf_terms,
        sigma2=rss / dof,
        A_inv=A_inv,
        null_directions=nulls,
        system=system,
    )


def reml_criterion(system: DesignSystem, log_lambda) -> float:
    """Negative restricted log-likelihood with the residual variance profiled out.

    ``2 V = (N - Mp)(1 + log(2 pi phi)) + log|X'X + S| - log|S|_+`` with
    ``phi = D_p / (N - Mp)``, ``D_p`` the penalized residual sum of squares
    and ``Mp`` the dimension of the unpenalized subspace.
    """
    return _reml(system, np.asarray(log_lambda, dtype=float).ravel())[0]


def _reml(system, log_lam):
    lam = np.exp(log_lam)
    f, theta, rss, penalty = _solve(system, lam)
    Dp = rss + penalty
    Mp = system.total_nullspace_dim
    # unidentified directions carry no information; drop them from the count
    Mp -= system.K - f.rank
    dof = system.N - Mp
    Dp = max(Dp, 1e-300 * max(system.yty, 1.0))
    phi = Dp / dof
    value = 0.5 * (dof * (1.0 + np.log(2 * np.pi * phi)) + f.logdet - system.log_pdet_S(lam))
    return float(value), theta, phi


def initial_log_lambda(system):
    """Balance each penalty against the data on its coefficient block."""
    out = np.zeros(system.V)
    d = np.diag(system.XtX)
    for v, p in enumerate(system.penalties):
        pd = np.diag(p.matrix)
        dd = d[p.sl]
        mask = pd > 0
        num = dd[mask].mean() if mask.any() and dd[mask].mean() > 0 else max(d.mean(), 1e-8)
        den = pd[mask].mean() if mask.any() else 1.0
        out[v] = np.log(num / den)
    return out


@dataclass
class RemlResult:
    log_lambda: np.ndarray
    value: float
    converged: bool
    iterations: int
    n_evaluations: int
    bounds: Optional[np.ndarray] = None


def _nelder_mead(fun, x0, bounds, maxiter, step=2.0):
    V = x0.size
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(V)])
    simplex = np.clip(simplex, bounds[:, 0], bounds[:, 1])
    return minimize(
        fun,
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={
            "initial_simplex": simplex,
            "xatol": XATOL,
            "fatol": FATOL,
            "maxiter": maxiter,
            "maxfev": 2 * maxiter,
        },
    )


XATOL = 1e-5
FATOL = 1e-7
POLISH_ROUNDS = 20


def _pin_flat(fun, x, bounds):
    """Move coordinates whose criterion is flat out to a bound onto that bound.

    Such coordinates are smoothing parameters that have effectively gone to
    zero or infinity; the simplex otherwise keeps wandering along them.
    """
    x = x.copy()
    base = fun(x)
    free = np.ones(x.size, dtype=bool)
    for v in range(x.size):
        for b in (bounds[v, 1], bounds[v, 0]):
            y = x.copy()
            y[v] = b
            fy = fun(y)
            if fy <= base + FATOL:
                x, base = y, min(base, fy)
                free[v] = False
                break
    return x, free


def _restricted(fun, x, free):
    def g(z):
        y = x.copy()
        y[free] = z
        return fun(y)
    return g


def _settle(fun, x, bounds, maxiter, step):
    """Pin flat coordinates, then rerun the simplex on the remaining ones."""
    x, free = _pin_flat(fun, x, bounds)
    if not free.any():
        return x, fun(x), True, 0, 0
    g = _restricted(fun, x, free)
    res = _nelder_mead(g, x[free], bounds[free], maxiter, step=step)
    y = x.copy()
    y[free] = res.x
    return y, float(res.fun), bool(res.success), int(res.nit), int(res.nfev)


def search_bounds(system, bounds=None):
    """Box for the log smoothing parameters, ``V x 2``.

    Defaults to ``LOG_LAMBDA_SPAN`` either side of the data-scaled start.
    """
    if bounds is None:
        center = initial_log_lambda(system)
        return np.column_stack([center - LOG_LAMBDA_SPAN, center + LOG_LAMBDA_SPAN])
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim == 1:
        bounds = np.tile(bounds, (system.V, 1))
    return bounds


def minimize_reml(system, init=None, n_starts=5, seed=0, maxiter=None, bounds=None) -> RemlResult:
    """Derivative-free simplex search over log smoothing parameters.

    The first start is ``init`` (or a data-scaled heuristic), the remaining
    ``n_starts - 1`` are random perturbations of it drawn from a generator
    seeded with ``seed``. The best run is then settled: coordinates along
    which the criterion is flat up to a bound are pinned there and the
    simplex is rerun on the rest, followed by restarts from any improving
    axis move. ``converged`` reports whether the final simplex met both
    tolerances.
    """
    V = system.V
    if V == 0:
        return RemlResult(np.zeros(0), reml_criterion(system, np.zeros(0)), True, 0, 1)
    x0 = initial_log_lambda(system) if init is None else np.asarray(init, dtype=float).ravel()
    bounds = search_bounds(system, bounds)
    x0 = np.clip(x0, bounds[:, 0], bounds[:, 1])
    maxiter = maxiter or 200 * V
    rng = np.random.default_rng(seed)
    starts = [x0] + [
        np.clip(x0 + rng.normal(0.0, 3.0, V), bounds[:, 0], bounds[:, 1]) for _ in range(n_starts - 1)
    ]
    cache = {}

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            cache[key] = _reml(system, x)[0]
        return cache[key]

    best, nit = None, 0
    for x in starts:
        res = _nelder_mead(fun, x, bounds, maxiter)
        nit += int(res.nit)
        if best is None or res.fun < best.fun - 1e-12:
            best = res
    x, value, success, k, _ = _settle(fun, best.x.copy(), bounds, maxiter, step=1.0)
    nit += k
    # the simplex can stall on ridges; restart from any improving axis move
    for _ in range(POLISH_ROUNDS):
        y = _improving_neighbour(fun, x, bounds)
        if y is None:
            break
        y, fy, ok, k, _ = _settle(fun, y, bounds, maxiter, step=0.5)
        nit += k
        if fy < value:
            x, value, success = y, fy, ok
        else:
            break
    return RemlResult(x, float(fun(x)), success, nit, len(cache), bounds)


def _improving_neighbour(fun, x, bounds, step=0.1, tol=1e-8):
    base = fun(x)
    scale = tol * max(1.0, abs(base))
    best, best_val = None, base - scale
    for v in range(x.size):
        for s in (-step, step):
            y = x.copy()
            y[v] = np.clip(y[v] + s, bounds[v, 0], bounds[v, 1])
            val = fun(y)
            if val < best_val:
                best, best_val = y, val
    return best


def is_local_minimum(system, log_lambda, step=0.1, tol=1e-8, bounds=None):
    """Check that ``+-step`` moves in each coordinate do not lower the criterion.

    With ``bounds``, moves leaving the box are skipped, so a coordinate
    resting on a bound only has to hold in the inward direction.
    """
    base = reml_criterion(system, log_lambda)
    scale = tol * max(1.0, abs(base))
    for v in range(len(log_lambda)):
        for s in (-step, step):
            x = np.array(log_lambda, dtype=float)
            x[v] += s
            if bounds is not None and not bounds[v, 0] <= x[v] <= bounds[v, 1]:
                continue
            if reml_criterion(system, x) < base - scale:
                return False
    return True


@dataclass
class FittedModel:
    """Result of a REML fit.

    ``coef_covariance`` is the empirical-Bayes posterior covariance
    ``sigma2 * (X'X + S)^-1``; ``edf`` holds per-term effective degrees of
    freedom.
    """

    theta_hat: np.ndarray
    lam: np.ndarray
    sigma2_eps: float
    coef_covariance: np.ndarray = field(repr=False)
    edf: dict
    reml_value: float
    converged: bool
    iterations: int
    system: DesignSystem = field(repr=False)
    fit: PenalizedFit = field(repr=False)
    local_minimum: Optional[bool] = None
    seconds: float = 0.0
    fpca: Optional[object] = field(default=None, repr=False)
    notes: list = field(default_factory=list)
    model_spec: Optional[object] = field(default=None, repr=False)
    dataset: Optional[object] = field(default=None, repr=False)
    context: dict = field(default_factory=dict, repr=False)

    @property
    def log_lambda(self):
        return np.log(self.lam)

    @property
    def terms(self):
        return self.system.terms

    @property
    def edf_total(self):
        return float(sum(self.edf.values()))

    @property
    def fitted(self):
        return self.fit.fitted

    def term(self, label):
        from .errors import UnknownTerm

        for t in self.system.terms:
            if t.label == label:
                return t
        raise UnknownTerm(f"no term labelled {label!r}")

    def term_coef(self, label):
        return self.theta_hat[self.system.term_slices[label]]


def optimize_reml(system, init=None, n_starts=5, seed=0, maxiter=None, bounds=None,
                  check_local_minimum=True) -> FittedModel:
    """Select smoothing parameters by REML and return the final fit."""
    t0 = time.perf_counter()
    res = minimize_reml(system, init, n_starts, seed, maxiter, bounds)
    lam = np.exp(res.log_lambda)
    fit = fit_penalized(system, lam)
    cov = fit.sigma2 * fit.A_inv
    local = None
    if check_local_minimum and system.V:
        local = is_local_minimum(system, res.log_lambda, bounds=res.bounds)
    return FittedModel(
        theta_hat=fit.theta,
        lam=lam,
        sigma2_eps=fit.sigma2,
        coef_covariance=cov,
        edf=fit.edf_terms,
        reml_value=res.value,
        converged=res.converged,
        iterations=res.iterations,
        system=system,
        fit=fit,
        local_minimum=local,
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# model-level pipeline


def prepare_dataset(ds, spec):
    """Center the functional covariates used in linear function-on-function terms.

    Returns the prepared dataset and ``{name: mean_curve}`` for the covariates
    that were centered here.
    """
    means = {}
    if not spec.center_functional:
        return ds, means
    from .data import center_functional_covariate

    for t in spec.terms:
        if t.kind != "functional_linear" or t.covariate in means:
            continue
        x = ds.functional(t.covariate)
        if not x.centered:
            xc = center_functional_covariate(x)
            ds = ds.with_functional(t.covariate, xc)
            means[t.covariate] = xc.mean_curve
    return ds, means


def _score_bases(scores, spec):
    from .basis import bspline_basis

    out = []
    for k in range(scores.shape[1]):
        _, b = bspline_basis(scores[:, k], spec.k_x, spec.degree_x, spec.order_x)
        out.append(b)
    return out


def build_model_terms(ds, spec, fpc=None, context=None):
    """Build and constrain all terms of ``spec`` on a prepared dataset.

    ``fpc`` supplies eigenfunctions for an ``fpc_random_intercept`` term.
    ``context`` collects objects needed later for prediction (FPCA fits of
    covariates behind FPC-based terms).
    """
    from .constraints import absorb_sum_to_zero_per_t, reference_grid
    from .fpca import fpca as run_fpca
    from .terms import build_term

    context = {} if context is None else context
    context.setdefault("covariate_fpca", {})
    grid = reference_grid(ds)
    terms = []
    for ts in spec.term_specs():
        extra = None
        if ts.kind in ("ffpc_linear", "ffpc_smooth"):
            if ts.covariate is None:
                raise MissingCovariate(f"{ts.kind} needs a functional covariate")
            x = ds.functional(ts.covariate)
            key = (ts.covariate, ts.n_components, ts.threshold)
            if key not in context["covariate_fpca"]:
                context["covariate_fpca"][key] = run_fpca(
                    x.uncentered(), x.s_grid, threshold=ts.threshold, n_components=ts.n_components
                )
            res = context["covariate_fpca"][key]
            extra = {"scores": res.scores}
            if ts.kind == "ffpc_smooth":
                extra["score_basis"] = _score_bases(res.scores, ts)
        elif ts.kind == "fpc_random_intercept":
            if fpc is None:
                raise ConflictError("fpc_random_intercept terms are fitted by the FPC loop")
            extra = fpc
        term = build_term(ds, ts, fpc=extra)
        if extra is not None and "score_basis" in extra:
            term.meta["score_basis"] = extra["score_basis"]
        if ts.constrained:
            term = absorb_sum_to_zero_per_t(term, grid)
        terms.append(term)
    return terms


def _fit_terms(ds, terms, spec, init_from=None):
    system = assemble_model(terms, ds.y)
    init = initial_log_lambda(system)
    if init_from is not None:
        prev = {p.label: v for p, v in zip(init_from.system.penalties, init_from.log_lambda)}
        for v, p in enumerate(system.penalties):
            if p.label in prev:
                init[v] = prev[p.label]
    opt = spec.optimizer
    return optimize_reml(system, init, opt.n_starts, opt.seed, opt.max_iter)


def fit_model(ds, spec) -> FittedModel:
    """Fit ``spec`` to ``ds`` with REML-selected smoothing parameters.

    Models with an ``fpc_random_intercept`` term go through
    :func:`fit_fpc_random_intercept_loop`.
    """
    if any(t.kind == "fpc_random_intercept" for t in spec.terms):
        return fit_fpc_random_intercept_loop(ds, spec)
    t0 = time.perf_counter()
    prepared, means = prepare_dataset(ds, spec)
    context = {"centering": means}
    terms = build_model_terms(prepared, spec, context=context)
    model = _fit_terms(prepared, terms, spec)
    model.model_spec = spec
    model.dataset = prepared
    model.context = context
    model.seconds = time.perf_counter() - t0
    return model


def group_mean_matrix(codes, M=None):
    """``M x n`` averaging matrix: row m holds ``1/n_m`` on the curves of level m."""
    codes = np.asarray(codes, dtype=int)
    M = int(codes.max()) if M is None else M
    D = np.zeros((M, codes.size))
    D[codes - 1, np.arange(codes.size)] = 1.0
    counts = D.sum(axis=1, keepdims=True)
    return D / np.where(counts > 0, counts, 1.0)


def fit_fpc_random_intercept_loop(ds, spec, repeats=None, on_degenerate="fallback"):
    """FPC-based functional random intercept by the three-step procedure.

    1. Fit the model without the random intercept.
    2. Average the residual curves within groups.
    3. Smooth their covariance without the diagonal, truncate its spectrum and
       refit with the eigenfunctions as the t-basis of the random intercept.

    Steps 2-3 run ``repeats`` times (default from ``spec.fpc.repeats``), each
    pass using residuals of the current fixed part. When no random structure
    is found the step-1 fit is returned with a warning (``on_degenerate=
    "fallback"``) or :class:`NoRandomStructure` is raised.
    """
    from .fpca import FpcaResult, eigen_truncate, estimate_covariance

    t0 = time.perf_counter()
    grid = ds.common_grid()
    if grid is None:
        raise GridMismatch("the FPC random-intercept procedure needs a common response grid")
    fpc_terms = [t for t in spec.terms if t.kind == "fpc_random_intercept"]
    if len(fpc_terms) != 1:
        raise ConflictError("exactly one fpc_random_intercept term is supported")
    fpc_spec = fpc_terms[0].resolved()
    base = spec.without({"fpc_random_intercept"})
    if not base.terms:
        raise ConflictError("the FPC procedure needs at least one other term")
    repeats = spec.fpc.repeats if repeats is None else repeats

    prepared, means = prepare_dataset(ds, spec)
    context = {"centering": means}
    base_terms = build_model_terms(prepared, base, context=context)
    model = _fit_terms(prepared, base_terms, spec)
    codes = prepared.grouping(fpc_spec.group)
    M = int(codes.max())
    Delta = group_mean_matrix(codes, M)
    Y = prepared.response_matrix()
    n_comp = fpc_spec.n_components or spec.fpc.n_components
    threshold = spec.fpc.threshold if spec.fpc.threshold is not None else fpc_spec.threshold
    result = None
    for _ in range(repeats):
        fixed = sum(
            model.system.design[:, t.coef_slice] @ model.theta_hat[t.coef_slice]
            for t in model.terms if t.kind != "fpc_random_intercept"
        )
        E = Y - np.asarray(fixed).reshape(Y.shape)
        Ebar = Delta @ E
        try:
            if M < 2:
                raise NoRandomStructure("need at least two groups")
            cov, noise, _ = estimate_covariance(Ebar, grid, center=False)
            w = _trapz(grid)
            raw_total = float(w @ np.mean(Ebar**2, axis=0))
            smooth_total = float(w @ np.diag(cov))
            if raw_total <= 0 or smooth_total < spec.fpc.min_variance_share * raw_total:
                raise NoRandomStructure("group-mean residual curves show no smooth covariance")
            eta, kappa = eigen_truncate(cov, grid, threshold, n_comp)
        except (NoRandomStructure, DegenerateCovariance) as e:
            if on_degenerate == "raise":
                raise NoRandomStructure(str(e)) from None
            warnings.warn(f"no functional random intercept structure found ({e}); "
                          "returning the fit without it", stacklevel=2)
            model.notes.append("no_random_structure")
            break
        result = FpcaResult(grid, eta, kappa, None, noise, cov, None)
        terms = build_model_terms(
            prepared, spec, fpc={"eigenfunctions": eta, "eigenvalues": kappa}, context=context
        )
        model = _fit_terms(prepared, terms, spec, init_from=model)
    if result is not None:
        lab = [t for t in model.terms if t.kind == "fpc_random_intercept"][0]
        result.scores = model.theta_hat[lab.coef_slice].reshape(M, -1)
    model.fpca = result
    model.model_spec = spec
    model.dataset = prepared
    model.context = context
    model.seconds = time.perf_counter() - t0
    return model


def _trapz(grid):
    from .basis import trapezoid_weights

    return trapezoid_weights(grid)
