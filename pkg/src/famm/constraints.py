"""Identifiability: sum-to-zero-for-each-t constraints and rank diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .basis import MarginalBasis, penalty_nullspace
from .data import FunctionalCovariate
from .errors import ConstraintNotApplicable, OverConstrained, TooFewCurves

REFERENCE_GRID_SIZE = 40
RANK_TOL = 1e-10


@dataclass
class ConstraintTransform:
    """Null-space basis ``Z`` of the constraint matrix ``C``.

    The constrained coefficients ``theta_c`` map to raw ones via
    ``theta = Z @ theta_c``; the columns of ``Z`` are orthonormal.
    """

    Z: np.ndarray
    c: int
    source_term: str
    C: np.ndarray
    t_grid: np.ndarray


def reference_grid(ds):
    """Grid on which per-t constraints are imposed.

    The common response grid when there is one, otherwise
    ``REFERENCE_GRID_SIZE`` equispaced points over the observed t range.
    """
    g = ds.common_grid()
    if g is not None:
        return g
    lo, hi = ds.t_range
    return np.linspace(lo, hi, REFERENCE_GRID_SIZE)


def per_t_means(term, t_grid, raw=True):
    """Average design row over all curves at every ``t`` in ``t_grid``.

    Returns a ``len(t_grid) x K`` matrix ``C`` such that ``C @ theta`` gives
    ``n^-1 sum_i f(X_i, t_l)``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    n, L = term.n_curves, t_grid.size
    ci = np.repeat(np.arange(n), L)
    tt = np.tile(t_grid, n)
    rows = term.evaluate_rows(ci, tt) if raw else term.constrained_rows(ci, tt)
    return rows.reshape(n, L, -1).mean(axis=0), np.sqrt(np.mean(rows**2))


def null_basis(C, scale):
    """Orthonormal basis of ``null(C)`` via pivoted QR of ``C.T``.

    Pivots whose magnitude is below ``RANK_TOL * scale`` count as zero, where
    ``scale`` is the typical size of a design entry; this keeps numerically
    zero constraints (e.g. from centered covariates) from being absorbed.
    """
    K = C.shape[1]
    if C.size == 0 or scale == 0:
        return np.eye(K), 0
    Q, R, _ = sla.qr(C.T, mode="full", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(scale, 1e-300)))
    if rank == 0:
        return np.eye(K), 0
    return Q[:, rank:], rank


def absorb_sum_to_zero_per_t(term, t_grid):
    """Re-parameterize ``term`` so its mean over curves is zero at every t.

    The design becomes ``Phi Z`` and each penalty ``Z' P Z``. With a
    numerically zero constraint (centered covariates) ``Z`` is the identity.
    """
    if term.kind.startswith("intercept"):
        raise ConstraintNotApplicable("intercept terms cannot carry a sum-to-zero constraint")
    if term.constraint is not None:
        raise ConstraintNotApplicable(f"term {term.label!r} is already constrained")
    C, scale = per_t_means(term, t_grid)
    Z, rank = null_basis(C, scale)
    if rank >= term.n_raw_coef:
        raise OverConstrained(f"constraint removes all coefficients of {term.label!r}")
    transform = ConstraintTransform(Z=Z, c=rank, source_term=term.label, C=C, t_grid=np.asarray(t_grid))
    out = replace(term)
    out.constraint = transform
    out.design = term.design @ Z
    out.penalties = [replace(p, matrix=_sym(Z.T @ p.matrix @ Z)) for p in term.penalties]
    return out


def _sym(P):
    return 0.5 * (P + P.T)


def constraint_violation(term, theta_r, t_grid=None):
    """Largest ``|n^-1 sum_i f(X_i, t)|`` over the constraint grid."""
    if t_grid is None:
        t_grid = term.constraint.t_grid
    C, _ = per_t_means(term, t_grid, raw=False)
    return float(np.abs(C @ theta_r).max())


def _covariate_eigen(x):
    X = x.values if isinstance(x, FunctionalCovariate) else np.asarray(x, dtype=float)
    if X.shape[0] < 2:
        raise TooFewCurves("need at least two curves")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    ev, U = np.linalg.eigh(cov)
    return ev[::-1], U[:, ::-1]


def _effective_rank_from(ev, threshold):
    top = ev.max(initial=0.0)
    if top <= 0:
        return 0
    pos = np.where(ev > 1e-12 * top, ev, 0.0)
    share = np.cumsum(pos) / pos.sum()
    return int(np.searchsorted(share, threshold - 1e-12) + 1)


def effective_rank(x, threshold=0.995):
    """Number of covariance eigenvalues holding ``threshold`` of the variability.

    Returns 0 (with a warning) when all curves coincide.
    """
    ev, _ = _covariate_eigen(x)
    r = _effective_rank_from(ev, threshold)
    if r == 0:
        warnings.warn("functional covariate has zero variance", stacklevel=2)
    return r


def nullspace_overlap(x, s_basis: MarginalBasis, threshold=0.995, s_grid=None):
    """Overlap between the covariate kernel and the penalty nullspace.

    The kernel is spanned by the covariance eigenvectors beyond the effective
    rank. The penalty nullspace is mapped to functions on the s grid through
    the basis. The result is the largest squared cosine of the principal
    angles between the two subspaces of grid vectors: 0 means no
    overlap, 1 means some nullspace function lies in the kernel.
    """
    if isinstance(x, FunctionalCovariate):
        s_grid = x.s_grid
    s_grid = np.asarray(s_grid, dtype=float)
    ev, U = _covariate_eigen(x)
    r = _effective_rank_from(ev, threshold)
    kernel = U[:, r:]
    N = penalty_nullspace(s_basis.penalty)
    if kernel.shape[1] == 0 or N.shape[1] == 0:
        return 0.0
    null_fns = s_basis.evaluate(s_grid) @ N
    cos = np.cos(sla.subspace_angles(null_fns, kernel))
    return float(np.clip(cos.max() ** 2, 0.0, 1.0))
