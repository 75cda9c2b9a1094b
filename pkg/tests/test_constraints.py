import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from famm.basis import bspline_basis, difference_penalty, MarginalBasis
from famm.constraints import (
    absorb_sum_to_zero_per_t,
    constraint_violation,
    effective_rank,
    nullspace_overlap,
    per_t_means,
    reference_grid,
)
from famm.data import FunctionalCovariate, build_dataset
from famm.errors import ConstraintNotApplicable, TooFewCurves
from famm.solver import assemble_model, fit_penalized
from famm.terms import TermSpec, build_intercept_term, build_term

from conftest import make_dataset


def _grid_ds(n, T, z=None, u=None, g=None):
    t = np.linspace(0, 1, T)
    recs = [(i + 1, tt, 0.0) for i in range(n) for tt in t]
    ids = list(range(1, n + 1))
    st_ = {"curve_id": ids}
    if z is not None:
        st_["z"] = z
    if u is not None:
        st_["u"] = u
    gt = {"curve_id": ids, "g": g} if g is not None else None
    return build_dataset(recs, st_, None, gt)


@pytest.mark.parametrize("spec", [
    TermSpec("scalar_smooth_t", covariate="z"),
    TermSpec("random_slope", group="g", covariate="u"),
    TermSpec("random_intercept", group="g"),
])
def test_absorbed_terms_average_to_zero(spec):
    rng = np.random.default_rng(0)
    n = 9
    ds = _grid_ds(n, 12, z=rng.uniform(0, 1, n), u=rng.uniform(0, 1, n), g=np.arange(n) % 3 + 1)
    term = absorb_sum_to_zero_per_t(build_term(ds, spec), reference_grid(ds))
    Z = term.constraint.Z
    np.testing.assert_allclose(Z.T @ Z, np.eye(Z.shape[1]), atol=1e-10)
    for _ in range(5):
        theta = rng.normal(size=term.n_coef) * 10
        means = (term.design @ theta).reshape(n, -1).mean(axis=0)
        assert np.abs(means).max() < 1e-8
        assert constraint_violation(term, theta) < 1e-8
    for p in term.penalties:
        np.testing.assert_allclose(p.matrix, p.matrix.T, atol=0)
        assert np.linalg.eigvalsh(p.matrix).min() > -1e-9 * np.abs(p.matrix).max()


def test_coefficient_count_drops_by_kt():
    rng = np.random.default_rng(1)
    ds = _grid_ds(8, 10, z=rng.uniform(0, 1, 8))
    raw = build_term(ds, TermSpec("scalar_smooth_t", covariate="z"))
    term = absorb_sum_to_zero_per_t(raw, reference_grid(ds))
    assert term.constraint.c == raw.Kt
    assert term.n_coef == raw.n_raw_coef - raw.Kt


def test_intercept_rejected():
    ds = make_dataset()
    with pytest.raises(ConstraintNotApplicable):
        absorb_sum_to_zero_per_t(build_intercept_term(ds), reference_grid(ds))


def test_per_t_constraint_beats_global_constraint():
    # three curves with different covariate values: a single global
    # sum-to-zero constraint leaves the per-t means free to move
    ds = _grid_ds(3, 6, z=[0.0, 0.2, 1.0])
    raw = build_term(ds, TermSpec("scalar_smooth_t", covariate="z", k_x=4, k_t=4))
    ones = np.ones(ds.n_obs)
    c_global = (ones @ raw.design)[None, :]
    _, _, Vt = np.linalg.svd(c_global)
    Z_global = Vt[1:].T
    rng = np.random.default_rng(2)
    theta = Z_global @ rng.normal(size=Z_global.shape[1])
    assert abs(ones @ raw.design @ theta) < 1e-10
    per_t = (raw.design @ theta).reshape(3, -1).mean(axis=0)
    assert np.abs(per_t).max() > 1e-3
    term = absorb_sum_to_zero_per_t(raw, reference_grid(ds))
    theta_c = rng.normal(size=term.n_coef)
    assert np.abs((term.design @ theta_c).reshape(3, -1).mean(axis=0)).max() < 1e-8


def test_centered_covariate_needs_no_absorption():
    ds = make_dataset()
    from famm.solver import prepare_dataset
    from famm.spec import ModelSpec

    spec = ModelSpec(terms=[TermSpec("functional_linear", covariate="x")])
    centered, _ = prepare_dataset(ds, spec)
    term = absorb_sum_to_zero_per_t(build_term(centered, spec.term_specs()[0]), reference_grid(centered))
    assert term.constraint.c == 0
    np.testing.assert_array_equal(term.constraint.Z, np.eye(term.n_raw_coef))


def test_irregular_grid_uses_reference_grid():
    recs = [(1, 0.0, 0), (1, 0.3, 0), (2, 0.5, 0), (2, 1.0, 0)]
    ds = build_dataset(recs)
    g = reference_grid(ds)
    assert g.size == 40 and g[0] == 0.0 and g[-1] == 1.0


def test_constrained_fit_matches_projected_unconstrained_fit():
    rng = np.random.default_rng(3)
    n, T = 15, 12
    z = rng.uniform(0, 1, n)
    t = np.linspace(0, 1, T)
    y = np.sin(3 * z)[:, None] * t[None, :] + np.cos(2 * t)[None, :]
    recs = [(i + 1, tt, yy) for i in range(n) for tt, yy in zip(t, y[i])]
    ds = build_dataset(recs, {"curve_id": list(range(1, n + 1)), "z": z})
    icpt = build_intercept_term(ds, TermSpec("intercept_t", k_t=5))
    raw = build_term(ds, TermSpec("scalar_smooth_t", covariate="z"), bases={"t": icpt.t_basis})
    con = absorb_sum_to_zero_per_t(raw, reference_grid(ds))
    lam_small = 1e-9
    unc = fit_penalized(assemble_model([icpt, raw], ds.y), [lam_small] * 3)
    icpt2 = build_intercept_term(ds, TermSpec("intercept_t", k_t=5))
    cfit = fit_penalized(assemble_model([icpt2, con], ds.y), [lam_small] * 3)
    np.testing.assert_allclose(cfit.fitted, unc.fitted, atol=1e-6)


def test_effective_rank_three_components():
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 50)
    basis = np.vstack([np.sin(np.pi * s), np.cos(2 * np.pi * s), s**3])
    X = rng.normal(size=(40, 3)) @ basis
    assert effective_rank(FunctionalCovariate(s, X)) == 3


def test_effective_rank_repeated_curve():
    s = np.linspace(0, 1, 10)
    X = np.tile(np.sin(s), (5, 1))
    with pytest.warns(UserWarning):
        assert effective_rank(FunctionalCovariate(s, X)) == 0


@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 1000))
def test_effective_rank_full_mass(n, H, seed):
    X = np.random.default_rng(seed).normal(size=(n, H))
    assert effective_rank(X, threshold=1.0) == min(n - 1, H)


def test_effective_rank_needs_two_curves():
    with pytest.raises(TooFewCurves):
        effective_rank(np.ones((1, 4)))


def test_overlap_zero_for_full_rank_covariate():
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 8)
    x = FunctionalCovariate(s, rng.normal(size=(200, 8)))
    _, sb = bspline_basis(s, 5, penalty_order=1)
    assert nullspace_overlap(x, sb, threshold=1.0) == 0.0


def test_overlap_when_kernel_contains_constants():
    # curves without a constant component: the constant function lies in
    # the covariance kernel and in the order-1 penalty nullspace
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 41)
    X = rng.normal(size=(30, 2)) @ np.vstack([np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)])
    x = FunctionalCovariate(s, X)
    _, sb = bspline_basis(s, 8, penalty_order=1)
    assert nullspace_overlap(x, sb) > 0.99


def test_overlap_zero_for_trivial_nullspace():
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 41)
    X = rng.normal(size=(30, 2)) @ np.vstack([np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)])
    _, sb = bspline_basis(s, 8, penalty_order=0)
    assert nullspace_overlap(FunctionalCovariate(s, X), sb) == 0.0


def test_per_t_means_shape():
    ds = make_dataset(n=5, T=7)
    term = build_term(ds, TermSpec("scalar_smooth_t", covariate="z"))
    C, scale = per_t_means(term, reference_grid(ds))
    assert C.shape == (7, term.n_raw_coef)
    assert scale > 0
