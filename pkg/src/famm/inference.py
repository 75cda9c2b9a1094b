"""Predictions, term estimates with pointwise bands, and residual summaries.

Standard errors use the empirical-Bayes covariance ``sigma2 (X'X + S)^-1``
in the constrained parameterization, so the constraint is carried through
``Z`` into every band.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data import FunctionalCovariate, FunctionalDataset
from .errors import UnknownTerm
from .fpca import estimate_scores


def z_multiplier(level=0.95):
    return float(norm.ppf(0.5 + level / 2))


@dataclass
class TermEstimate:
    """A term (or the fitted curves) evaluated on a grid with pointwise bands.

    ``grid`` holds the evaluation points as columns: covariate point(s)
    first, ``t`` last, with ``t`` varying fastest.
    """

    label: str
    grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float = 0.95
    columns: tuple = ()


def _term(model, label):
    for t in model.terms:
        if t.label == label:
            return t
    raise UnknownTerm(f"no term labelled {label!r}; known: {[t.label for t in model.terms]}")


def _rowwise_quad(R, V):
    return np.einsum("ij,ij->i", R @ V, R)


def _prepare_newdata(model, ds: FunctionalDataset):
    for name, mean in model.context.get("centering", {}).items():
        x = ds.functional(name)
        if not x.centered:
            ds = ds.with_functional(
                name, FunctionalCovariate(x.s_grid, x.values - mean, mean_curve=mean, centered=True)
            )
    return ds


def _newdata_term(model, term, ds):
    from .terms import build_term

    fpc = None
    spec = term.spec
    if spec.kind in ("ffpc_linear", "ffpc_smooth"):
        key = (spec.covariate, spec.n_components, spec.threshold)
        res = model.context["covariate_fpca"][key]
        fpc = {"scores": estimate_scores(ds.functional(spec.covariate).uncentered(), res)}
        if "score_basis" in term.meta:
            fpc["score_basis"] = term.meta["score_basis"]
    elif spec.kind == "fpc_random_intercept":
        fpc = {"eigenfunctions": term.meta["eigenfunctions"], "eigenvalues": term.meta["eigenvalues"]}
    new = build_term(ds, spec, bases=term.bases, fpc=fpc)
    return new.design if term.Z is None else new.design @ term.Z


def term_designs(model, newdata: Optional[FunctionalDataset] = None):
    """Constrained design block of every term, on training rows or ``newdata``."""
    if newdata is None:
        return {t.label: model.system.design[:, t.coef_slice] for t in model.terms}
    ds = _prepare_newdata(model, newdata)
    return {t.label: _newdata_term(model, t, ds) for t in model.terms}


def term_contributions(model, newdata=None):
    """Per-term contributions ``Phi_r theta_r`` to the stacked predictor."""
    designs = term_designs(model, newdata)
    return {t.label: designs[t.label] @ model.theta_hat[t.coef_slice] for t in model.terms}


def predict(model, newdata=None):
    """Fitted values; on the training data exactly ``design @ theta_hat``."""
    if newdata is None:
        return model.system.design @ model.theta_hat
    designs = term_designs(model, newdata)
    return np.hstack([designs[t.label] for t in model.terms]) @ model.theta_hat


def fitted_with_ci(model, level=0.95, newdata=None, labels=None):
    """Pointwise bands for the predictor (or the sum of the ``labels`` terms)."""
    designs = term_designs(model, newdata)
    K = model.theta_hat.size
    rows = None
    for t in model.terms:
        if labels is not None and t.label not in labels:
            continue
        block = np.zeros((designs[t.label].shape[0], K))
        block[:, t.coef_slice] = designs[t.label]
        rows = block if rows is None else rows + block
    values = rows @ model.theta_hat
    se = np.sqrt(np.clip(_rowwise_quad(rows, model.coef_covariance), 0.0, None))
    z = z_multiplier(level)
    ds = model.dataset if newdata is None else newdata
    grid = np.column_stack([ds.curve_index, ds.t])
    return TermEstimate(
        "fitted", grid, values, se, values - z * se, values + z * se, level, ("curve", "t")
    )


def _eval_points(term, eval_grid):
    """Expand ``eval_grid`` into paired (x, t) points with t varying fastest."""
    if isinstance(eval_grid, tuple):
        x_pts, t_pts = eval_grid
        x_pts = np.asarray(x_pts, dtype=float)
        t_pts = np.atleast_1d(np.asarray(t_pts, dtype=float))
        x2 = x_pts.reshape(x_pts.shape[0], -1)
        X = np.repeat(x2, t_pts.size, axis=0)
        T = np.tile(t_pts, x2.shape[0])
        return X, T
    t_pts = np.atleast_1d(np.asarray(eval_grid, dtype=float))
    return np.ones((t_pts.size, 1)), t_pts


def coef_with_ci(model, term_label, eval_grid, level=0.95) -> TermEstimate:
    """Coefficient function of a term with pointwise empirical-Bayes bands.

    ``eval_grid`` is a vector of t values for terms without a covariate
    direction (intercepts, linear scalar effects), or a tuple
    ``(covariate_points, t_points)`` evaluated on their product grid:
    ``s`` values for ``beta(s, t)``, ``z`` values for ``gamma(z, t)``,
    ``(x, s)`` pairs for smooth function-on-function effects, level codes
    for random effects, score vectors for FPC-based effects.
    """
    term = _term(model, term_label)
    X, T = _eval_points(term, eval_grid)
    if term.kind in ("random_intercept", "random_slope", "fpc_random_intercept"):
        x_arg = X[:, 0].astype(int)
    elif X.shape[1] == 1:
        x_arg = X[:, 0]
    else:
        x_arg = X
    R = term.coef_rows(x_arg, T)
    sl = term.coef_slice
    values = R @ model.theta_hat[sl]
    se = np.sqrt(np.clip(_rowwise_quad(R, model.coef_covariance[sl, sl]), 0.0, None))
    z = z_multiplier(level)
    cols = tuple(f"x{j}" for j in range(X.shape[1])) + ("t",)
    return TermEstimate(term_label, np.column_stack([X, T]), values, se,
                        values - z * se, values + z * se, level, cols)


@dataclass
class ResidualSummary:
    residuals: list
    covariance: Optional[np.ndarray]
    correlation: Optional[np.ndarray]
    grid: Optional[np.ndarray]


def residual_curves(model, ds=None) -> ResidualSummary:
    """Residual curves and, on a common grid, their covariance and correlation."""
    ds = model.dataset if ds is None else ds
    fitted = predict(model) if ds is model.dataset else predict(model, ds)
    r = ds.y - fitted
    parts = np.split(r, np.cumsum(ds.lengths)[:-1])
    grid = ds.common_grid()
    if grid is None:
        return ResidualSummary(parts, None, None, None)
    E = np.vstack(parts)
    Ec = E - E.mean(axis=0)
    cov = Ec.T @ Ec / max(E.shape[0] - 1, 1)
    sd = np.sqrt(np.diag(cov))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.outer(sd, sd)
    corr = np.where(np.outer(sd, sd) > 0, corr, 0.0)
    np.fill_diagonal(corr, np.where(sd > 0, 1.0, 0.0))
    return ResidualSummary(parts, cov, corr, grid)


def default_eval_grid(model, term, n_points=20):
    """Evaluation grid for reporting a term's coefficient function.

    Returns ``(eval_grid, shape)`` where ``shape`` is ``(n_x, n_t)`` for
    surfaces and ``None`` for curves in t.
    """
    ds = model.dataset
    t_grid = ds.common_grid()
    if t_grid is None:
        lo, hi = ds.t_range
        t_grid = np.linspace(lo, hi, 50)
    kind = term.kind
    if kind in ("intercept_t", "scalar_linear_t"):
        return t_grid, None
    if kind in ("intercept_const", "scalar_linear_const"):
        return t_grid[:1], None
    if kind in ("scalar_smooth", "scalar_smooth_t", "varying_coef_t"):
        z = ds.scalar(term.spec.covariate)
        zg = np.linspace(z.min(), z.max(), n_points)
        if kind == "varying_coef_t":
            zg = np.column_stack([zg, np.ones_like(zg)])
        tg = t_grid if term.spec.varies_over_t else t_grid[:1]
        return (zg, tg), (n_points, tg.size)
    if kind == "functional_linear":
        s = term.meta["s_grid"]
        return (s, t_grid), (s.size, t_grid.size)
    if kind == "functional_smooth":
        s = term.meta["s_grid"]
        xvals = ds.functional(term.spec.covariate).values
        xg = np.linspace(xvals.min(), xvals.max(), n_points)
        xs = np.array([(x, si) for x in xg for si in s])
        return (xs, t_grid), (xs.shape[0], t_grid.size)
    if kind == "ffpc_linear":
        Kc = term.Kx
        return (np.eye(Kc), t_grid), (Kc, t_grid.size)
    if kind == "ffpc_smooth":
        Kc = len(term.meta["score_basis"])
        pts = []
        for k, b in enumerate(term.meta["score_basis"]):
            lo, hi = b.domain
            for v in np.linspace(lo, hi, n_points):
                p = np.zeros(Kc)
                p[k] = v
                pts.append(p)
        return (np.array(pts), t_grid), (len(pts), t_grid.size)
    # random effects: one curve per level
    M = term.meta["n_levels"]
    return (np.arange(1, M + 1), t_grid), (M, t_grid.size)
