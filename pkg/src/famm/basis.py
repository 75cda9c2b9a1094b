"""Marginal bases, difference penalties and tensor-product algebra.

Coefficient layout is x-major everywhere: for a term with ``Kx`` covariate
basis functions and ``Kt`` index basis functions, coefficient
``(kx, kt)`` sits at position ``kx * Kt + kt``. :func:`row_tensor` and
:func:`kronecker_sum_penalty` both follow this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import BSpline

from .errors import (
    BasisRangeError,
    DimensionMismatch,
    GridTooSmall,
    InvalidBasisSize,
    InvalidPenalty,
    InvalidPenaltyOrder,
    InvalidValue,
)

PSD_RTOL = 1e-9


def difference_penalty(K: int, order: int) -> np.ndarray:
    """Return ``D.T @ D`` for the ``order``-th difference operator on ``K`` coefficients.

    ``order=0`` gives the identity (a ridge penalty without nullspace).
    """
    if order < 0 or order >= K:
        raise InvalidPenaltyOrder(f"penalty order {order} invalid for K={K}")
    D = np.diff(np.eye(K), n=order, axis=0)
    return D.T @ D


def clean_psd(P, name="penalty"):
    """Symmetrize ``P`` and clip tiny negative eigenvalues.

    Raises :class:`InvalidPenalty` if ``P`` is not symmetric or has
    eigenvalues below ``-1e-9 * max|eigenvalue|``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[0] != P.shape[1]:
        raise InvalidPenalty(f"{name} is not square")
    scale = max(np.abs(P).max(), 1.0) if P.size else 1.0
    if np.abs(P - P.T).max(initial=0.0) > 1e-10 * scale:
        raise InvalidPenalty(f"{name} is not symmetric")
    P = 0.5 * (P + P.T)
    if not P.size or not np.any(P):
        return P
    ev, U = np.linalg.eigh(P)
    top = np.abs(ev).max()
    if ev.min() < -PSD_RTOL * top:
        raise InvalidPenalty(f"{name} is not positive semidefinite (min eigenvalue {ev.min():.3g})")
    if ev.min() < 0:
        ev = np.clip(ev, 0.0, None)
        P = (U * ev) @ U.T
        P = 0.5 * (P + P.T)
    return P


def penalty_rank(P, rtol=1e-9):
    if not P.size or not np.any(P):
        return 0
    ev = np.linalg.eigvalsh(P)
    return int(np.sum(ev > rtol * ev.max()))


def penalty_nullspace(P, rtol=1e-9):
    """Orthonormal basis (columns) of the nullspace of a PSD matrix."""
    K = P.shape[0]
    if not np.any(P):
        return np.eye(K)
    ev, U = np.linalg.eigh(P)
    return U[:, ev <= rtol * ev.max()]


@dataclass
class MarginalBasis:
    """A marginal basis together with its roughness penalty.

    ``kind`` is one of ``bspline``, ``linear_column``, ``constant_column``,
    ``incidence`` or ``custom_columns``. ``evaluate`` maps points to the
    ``len(points) x K`` evaluation matrix.
    """

    kind: str
    K: int
    penalty: np.ndarray
    knots: Optional[np.ndarray] = None
    degree: Optional[int] = None
    penalty_order: Optional[int] = None
    domain: Optional[tuple] = None
    evaluator: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        self.penalty = clean_psd(self.penalty, f"{self.kind} penalty")
        if self.penalty.shape != (self.K, self.K):
            raise DimensionMismatch("penalty size does not match basis dimension")

    @property
    def nullspace_dim(self):
        return self.K - penalty_rank(self.penalty)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "bspline":
            return _bspline_design(x.ravel(), self.knots, self.degree, self.domain)
        if self.kind == "constant_column":
            return np.ones((x.shape[0], 1))
        if self.evaluator is None:
            raise NotImplementedError(f"{self.kind} basis cannot evaluate new points")
        return self.evaluator(x)


def _bspline_design(x, knots, degree, domain):
    lo, hi = domain
    tol = 1e-10 * max(hi - lo, 1.0)
    if x.size and (x.min() < lo - tol or x.max() > hi + tol):
        raise BasisRangeError(
            f"points outside basis range [{lo:.6g}, {hi:.6g}]: observed [{x.min():.6g}, {x.max():.6g}]"
        )
    x = np.clip(x, lo, hi)
    B = BSpline.design_matrix(x, knots, degree, extrapolate=False).toarray()
    return B


def bspline_basis(grid, K: int, degree: int = 3, penalty_order: int = 1, domain=None):
    """Evaluate an equidistant-knot B-spline basis on ``grid``.

    The domain defaults to ``[min(grid), max(grid)]``. Knots are equally
    spaced across the domain and extended by ``degree`` equally spaced knots
    on each side, which gives a partition of unity on the whole domain.

    Returns
    -------
    B : ndarray, shape (len(grid), K)
    basis : MarginalBasis
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if degree < 0 or K < degree + 1:
        raise InvalidBasisSize(f"K={K} too small for degree {degree}")
    if domain is None:
        domain = (float(grid.min()), float(grid.max()))
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        hi = lo + 1.0
    nseg = K - degree
    h = (hi - lo) / nseg
    knots = lo + h * np.arange(-degree, nseg + degree + 1)
    knots[degree] = lo
    knots[nseg + degree] = hi
    basis = MarginalBasis(
        kind="bspline",
        K=K,
        penalty=difference_penalty(K, penalty_order),
        knots=knots,
        degree=degree,
        penalty_order=penalty_order,
        domain=(lo, hi),
    )
    return basis.evaluate(grid), basis


def constant_basis():
    return MarginalBasis(kind="constant_column", K=1, penalty=np.zeros((1, 1)))


def row_tensor(A, B):
    """Row tensor product: ``out[i, j*b + k] = A[i, j] * B[i, k]``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] != B.shape[0]:
        raise DimensionMismatch(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    m = A.shape[0]
    return (A[:, :, None] * B[:, None, :]).reshape(m, A.shape[1] * B.shape[1])


@dataclass
class PenaltyBlock:
    """A square PSD penalty with its (yet to be assigned) smoothing index.

    ``scale`` holds the current smoothing parameter value, if any.
    """

    matrix: np.ndarray
    smoothing_index: Optional[int] = None
    scale: Optional[float] = None
    label: str = ""

    @property
    def size(self):
        return self.matrix.shape[0]

    def is_zero(self):
        return not np.any(self.matrix)


def kronecker_sum_penalty(P_x, P_t):
    """Split the Kronecker-sum penalty into its two blocks.

    Returns ``(P_x kron I_Kt, I_Kx kron P_t)`` as :class:`PenaltyBlock`.
    """
    P_x = clean_psd(P_x, "P_x")
    P_t = clean_psd(P_t, "P_t")
    Kx, Kt = P_x.shape[0], P_t.shape[0]
    b1 = PenaltyBlock(np.kron(P_x, np.eye(Kt)), smoothing_index=0, label="x")
    b2 = PenaltyBlock(np.kron(np.eye(Kx), P_t), smoothing_index=1, label="t")
    return b1, b2


def trapezoid_weights(s_grid):
    """Trapezoid-rule quadrature weights on an arbitrary increasing grid."""
    s = np.asarray(s_grid, dtype=float).ravel()
    if s.size < 2:
        raise GridTooSmall("quadrature needs at least two grid points")
    if np.any(np.diff(s) <= 0):
        raise InvalidValue("grid must be strictly increasing")
    d = np.diff(s)
    w = np.zeros_like(s)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w
