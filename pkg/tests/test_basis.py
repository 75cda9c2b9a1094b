import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from famm.basis import (
    bspline_basis,
    clean_psd,
    difference_penalty,
    kronecker_sum_penalty,
    row_tensor,
    trapezoid_weights,
)
from famm.errors import (
    DimensionMismatch,
    GridTooSmall,
    InvalidBasisSize,
    InvalidPenalty,
    InvalidPenaltyOrder,
)


def test_degree_zero_indicators():
    B, _ = bspline_basis([0.25, 0.75], K=2, degree=0, domain=(0, 1))
    np.testing.assert_array_equal(B, [[1, 0], [0, 1]])


@given(st.integers(0, 4), st.integers(0, 12), st.integers(0, 2**16))
def test_partition_of_unity(degree, extra, seed):
    K = degree + 2 + extra
    grid = np.sort(np.random.default_rng(seed).uniform(-2, 3, 30))
    B, _ = bspline_basis(grid, K, degree)
    assert np.abs(B.sum(axis=1) - 1).max() < 1e-10


def test_local_support():
    grid = np.random.default_rng(1).uniform(0, 1, 50)
    B, _ = bspline_basis(grid, K=10, degree=3)
    assert (np.count_nonzero(np.abs(B) > 0, axis=1) <= 4).all()


def test_basis_too_small():
    with pytest.raises(InvalidBasisSize):
        bspline_basis(np.linspace(0, 1, 5), K=3, degree=3)


def test_knots_equidistant():
    _, b = bspline_basis(np.linspace(2, 5, 9), K=8, degree=3)
    assert b.domain == (2.0, 5.0)
    np.testing.assert_allclose(np.diff(b.knots), (5 - 2) / 5)


def test_first_order_penalty_example():
    np.testing.assert_array_equal(difference_penalty(3, 1), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_second_order_nullspace():
    P = difference_penalty(4, 2)
    assert np.linalg.matrix_rank(P) == 2
    for v in (np.ones(4), np.arange(1.0, 5.0)):
        np.testing.assert_allclose(P @ v, 0, atol=1e-12)


@pytest.mark.parametrize("K,order", [(5, 1), (6, 2), (7, 3), (20, 1)])
def test_constants_unpenalized(K, order):
    P = difference_penalty(K, order)
    theta = np.ones(K)
    assert theta @ P @ theta == 0
    assert np.linalg.matrix_rank(P) == K - order


def test_penalty_order_too_large():
    with pytest.raises(InvalidPenaltyOrder):
        difference_penalty(3, 3)


def test_row_tensor_example():
    np.testing.assert_array_equal(row_tensor([[1, 2]], [[3, 4]]), [[3, 4, 6, 8]])


def test_row_tensor_with_ones_is_identity():
    A = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(row_tensor(A, np.ones((5, 1))), A)


def test_row_tensor_matches_kronecker_construction():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    ref = np.kron(A, np.ones((1, 4))) * np.kron(np.ones((1, 3)), B)
    np.testing.assert_allclose(row_tensor(A, B), ref, rtol=0, atol=1e-15)


def test_row_tensor_row_mismatch():
    with pytest.raises(DimensionMismatch):
        row_tensor(np.ones((3, 2)), np.ones((4, 2)))


def test_kronecker_sum_rank():
    b1, b2 = kronecker_sum_penalty(difference_penalty(5, 2), difference_penalty(4, 1))
    for l1, l2 in [(1.0, 1.0), (0.3, 7.0), (50.0, 0.02)]:
        assert np.linalg.matrix_rank(l1 * b1.matrix + l2 * b2.matrix) == 18
    assert b1.smoothing_index != b2.smoothing_index


def test_kronecker_sum_zero_block():
    b1, b2 = kronecker_sum_penalty(np.zeros((3, 3)), difference_penalty(4, 1))
    assert b1.is_zero()
    assert not b2.is_zero()


def test_kronecker_sum_joint_nullspace():
    Px, Pt = difference_penalty(5, 2), difference_penalty(4, 1)
    b1, b2 = kronecker_sum_penalty(Px, Pt)
    theta = np.kron(np.arange(5.0), np.ones(4))
    assert abs(theta @ (b1.matrix + b2.matrix) @ theta) < 1e-12


def test_kronecker_sum_layout_matches_row_tensor():
    # penalizing differences across t within each x must leave a function
    # that is constant in t unpenalized
    rng = np.random.default_rng(0)
    Bx, Bt = rng.normal(size=(6, 3)), np.ones((6, 4)) / 4
    _, b2 = kronecker_sum_penalty(difference_penalty(3, 1), difference_penalty(4, 1))
    theta = np.repeat(rng.normal(size=3), 4)
    assert abs(theta @ b2.matrix @ theta) < 1e-12
    np.testing.assert_allclose(row_tensor(Bx, Bt) @ theta, Bx @ theta[::4])


def test_asymmetric_penalty_rejected():
    with pytest.raises(InvalidPenalty):
        kronecker_sum_penalty(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2))
    with pytest.raises(InvalidPenalty):
        clean_psd(-np.eye(3))


def test_trapezoid_example():
    np.testing.assert_array_equal(trapezoid_weights([0, 0.5, 1]), [0.25, 0.5, 0.25])


def test_trapezoid_constant_exact():
    assert trapezoid_weights(np.linspace(0, 1, 37)).sum() == pytest.approx(1.0, abs=1e-15)


def test_trapezoid_square():
    s = np.linspace(0, 1, 101)
    assert abs(trapezoid_weights(s) @ s**2 - 1 / 3) < 1e-4


def test_trapezoid_grid_too_small():
    with pytest.raises(GridTooSmall):
        trapezoid_weights([0.3])


@given(st.lists(st.floats(0.01, 5), min_size=1, max_size=30), st.floats(-10, 10))
def test_trapezoid_weights_sum_to_range(gaps, start):
    s = start + np.concatenate([[0.0], np.cumsum(gaps)])
    w = trapezoid_weights(s)
    assert w.sum() == pytest.approx(s[-1] - s[0], rel=1e-12)
    # exact for linear integrands
    assert w @ s == pytest.approx((s[-1] ** 2 - s[0] ** 2) / 2, rel=1e-9, abs=1e-9)
