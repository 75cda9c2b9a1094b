"""Functional principal components for curves on a common grid.

Missing evaluations are marked with ``nan``. The covariance surface is
estimated from pooled cross-products with the diagonal left out (it carries
the measurement-error variance), smoothed by a penalized tensor-product
spline, and decomposed with respect to the trapezoid inner product so that
eigenfunctions satisfy ``int eta_j eta_k = delta_jk``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import bspline_basis, difference_penalty, row_tensor, trapezoid_weights
from .errors import DegenerateCovariance, DimensionMismatch, EmptyCurve, TooFewCurves
from .solver import DesignSystem, GlobalPenalty, fit_penalized, minimize_reml

COV_BASIS_SIZE = 10
COV_PENALTY_ORDER = 2


@dataclass
class FpcaResult:
    grid: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    scores: Optional[np.ndarray]
    noise_variance: float
    smoothed_covariance: np.ndarray
    mean: Optional[np.ndarray] = None

    @property
    def n_components(self):
        return self.eigenvalues.size


def _as_matrix(curves, grid):
    Y = np.atleast_2d(np.asarray(curves, dtype=float))
    if Y.shape[1] != np.size(grid):
        raise DimensionMismatch(f"curves have {Y.shape[1]} columns, grid has {np.size(grid)} points")
    return Y


def _pooled_cross_products(Y):
    """Mean of ``Y[:, j] * Y[:, k]`` over curves observing both points."""
    obs = ~np.isnan(Y)
    Y0 = np.where(obs, Y, 0.0)
    counts = obs.T.astype(float) @ obs.astype(float)
    sums = Y0.T @ Y0
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), np.nan)
    return raw, counts


def smooth_surface(grid, raw, counts, k=COV_BASIS_SIZE, order=COV_PENALTY_ORDER, include_diagonal=False):
    """Penalized tensor-spline smooth of a gridded symmetric surface.

    Cells with zero count (and the diagonal unless ``include_diagonal``) are
    left out; the remaining cells are weighted by their counts. Smoothing
    parameters are chosen by REML.
    """
    grid = np.asarray(grid, dtype=float)
    T = grid.size
    k = max(4, min(k, T))
    order = min(order, k - 1)
    B, basis = bspline_basis(grid, k, 3, order)
    jj, kk = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    keep = counts > 0
    if not include_diagonal:
        keep &= jj != kk
    jj, kk = jj[keep], kk[keep]
    X = row_tensor(B[jj], B[kk])
    P = difference_penalty(k, order)
    I = np.eye(k)
    sl = slice(0, k * k)
    pens = [GlobalPenalty(np.kron(P, I), sl, "s1", "cov"), GlobalPenalty(np.kron(I, P), sl, "s2", "cov")]
    system = DesignSystem(raw[jj, kk], X, pens, {"cov": sl}, weights=counts[jj, kk])
    res = minimize_reml(system, n_starts=3)
    theta = fit_penalized(system, np.exp(res.log_lambda)).theta
    S = B @ theta.reshape(k, k) @ B.T
    return 0.5 * (S + S.T)


def estimate_covariance(curves, grid, center=True, k=COV_BASIS_SIZE):
    """Smoothed covariance surface and measurement-error variance.

    Parameters
    ----------
    curves : array, shape (n, T)
        Curve values, ``nan`` where unobserved.
    grid : array, shape (T,)
    center : bool
        Subtract the pointwise mean first. Use ``False`` for inputs that are
        already mean-zero by construction, such as residual curves.

    Returns
    -------
    cov : array, shape (T, T)
    noise_variance : float
    mean : array, shape (T,)
    """
    grid = np.asarray(grid, dtype=float)
    Y = _as_matrix(curves, grid)
    if Y.shape[0] < 2:
        raise TooFewCurves("covariance estimation needs at least two curves")
    T = grid.size
    if center:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(Y, axis=0)
        mean = np.where(np.isnan(mean), 0.0, mean)
    else:
        mean = np.zeros(T)
    Yc = Y - mean
    raw, counts = _pooled_cross_products(Yc)
    if not np.any(np.nan_to_num(Yc)):
        return np.zeros((T, T)), 0.0, mean
    cov = smooth_surface(grid, raw, counts, k)
    d = np.diag(counts) > 0
    noise = float(np.mean(np.diag(raw)[d] - np.diag(cov)[d]))
    if noise < 0:
        warnings.warn(f"negative noise variance estimate {noise:.3g} clipped to 0", stacklevel=2)
        noise = 0.0
    return cov, noise, mean


def eigen_truncate(cov, grid, threshold=0.995, n_components=None):
    """Eigenpairs of the covariance operator under the trapezoid inner product.

    Keeps the smallest number of components whose share of the positive
    eigenvalue mass reaches ``threshold``, or exactly ``n_components`` (capped
    at the number of positive eigenvalues).

    Returns
    -------
    eigenfunctions : array, shape (T, K)
    eigenvalues : array, shape (K,)
    """
    cov = np.asarray(cov, dtype=float)
    grid = np.asarray(grid, dtype=float)
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    A = sw[:, None] * (0.5 * (cov + cov.T)) * sw[None, :]
    ev, U = np.linalg.eigh(A)
    ev, U = ev[::-1], U[:, ::-1]
    top = ev[0] if ev.size else 0.0
    pos = ev > max(top, 0.0) * 1e-12
    if top <= 0 or not pos.any():
        raise DegenerateCovariance("covariance has no positive eigenvalues")
    ev, U = ev[pos], U[:, pos]
    if n_components is not None:
        K = int(min(n_components, ev.size))
    else:
        share = np.cumsum(ev) / ev.sum()
        K = int(np.searchsorted(share, threshold - 1e-12) + 1)
        K = min(K, ev.size)
    eta = U[:, :K] / sw[:, None]
    idx = np.abs(eta).argmax(axis=0)
    signs = np.sign(eta[idx, np.arange(K)])
    eta = eta * np.where(signs == 0, 1.0, signs)
    return eta, ev[:K].copy()


def estimate_scores(curves, fpca: FpcaResult):
    """Conditional-expectation scores ``(H'H + s2 L^-1)^-1 H' y`` per curve.

    ``H`` holds the eigenfunction rows at the curve's observed points. With
    zero noise variance this is the least-squares projection.
    """
    Y = _as_matrix(curves, fpca.grid)
    if fpca.mean is not None:
        Y = Y - fpca.mean
    E = fpca.eigenfunctions
    lam = fpca.eigenvalues
    s2 = float(fpca.noise_variance)
    out = np.zeros((Y.shape[0], lam.size))
    full = ~np.isnan(Y).any(axis=1)
    if full.any():
        out[full] = _scores_block(E, Y[full].T, lam, s2).T
    for i in np.flatnonzero(~full):
        m = ~np.isnan(Y[i])
        if not m.any():
            raise EmptyCurve(f"curve at position {i} has no observed points")
        out[i] = _scores_block(E[m], Y[i, m][:, None], lam, s2)[:, 0]
    return out


def _scores_block(H, Y, lam, s2):
    if s2 > 0:
        A = H.T @ H + np.diag(s2 / lam)
        return np.linalg.solve(A, H.T @ Y)
    return np.linalg.lstsq(H, Y, rcond=None)[0]


def reconstruct(fpca: FpcaResult, scores):
    """Dense curves ``mean + scores @ eigenfunctions.T``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    if scores.shape[1] != fpca.n_components:
        raise DimensionMismatch(
            f"scores have {scores.shape[1]} columns, expected {fpca.n_components}"
        )
    out = scores @ fpca.eigenfunctions.T
    if fpca.mean is not None:
        out = out + fpca.mean
    return out


def fpca(curves, grid, threshold=0.995, n_components=None, center=True, k=COV_BASIS_SIZE):
    """Covariance smoothing, truncation and score estimation in one call."""
    grid = np.asarray(grid, dtype=float)
    cov, noise, mean = estimate_covariance(curves, grid, center=center, k=k)
    eta, kappa = eigen_truncate(cov, grid, threshold, n_components)
    res = FpcaResult(grid, eta, kappa, None, noise, cov, mean if center else None)
    res.scores = estimate_scores(curves, res)
    return res
