"""
Bases and penalties
===================

Equidistant cubic B-splines, difference penalties and the tensor-product
construction behind every term: a row tensor product of a covariate basis
and a basis over t, penalized by a Kronecker sum so that smoothness in each
direction gets its own smoothing parameter.
"""

import numpy as np

from famm import bspline_basis, difference_penalty, kronecker_sum_penalty, row_tensor, trapezoid_weights
from famm.basis import penalty_rank

grid = np.linspace(0, 1, 101)
B, basis = bspline_basis(grid, K=8, degree=3, penalty_order=2)
print("basis matrix", B.shape, "row sums in [%.12f, %.12f]" % (B.sum(1).min(), B.sum(1).max()))
print("knots", np.round(basis.knots, 3))

# The first-order penalty on 4 coefficients
print(difference_penalty(4, 1))

# A second-order penalty leaves constants and straight lines unpenalized
P2 = difference_penalty(8, 2)
line = 0.3 + 2.0 * np.arange(8)
print("rank of P2:", penalty_rank(P2), " line' P2 line =", line @ P2 @ line)

# Row tensor product of a covariate basis and a t basis
z = np.random.default_rng(1).uniform(size=101)
Bz, _ = bspline_basis(z, K=5)
Bt, _ = bspline_basis(grid, K=6)
X = row_tensor(Bz, Bt)
print("row tensor design", X.shape)

# Kronecker-sum penalty: two blocks, one smoothing parameter each
px, pt = kronecker_sum_penalty(difference_penalty(5, 2), difference_penalty(6, 1))
print("penalty ranks: x-direction", penalty_rank(px.matrix), "t-direction", penalty_rank(pt.matrix),
      "joint", penalty_rank(px.matrix + pt.matrix), "of", X.shape[1])

# Trapezoid weights integrate piecewise-linear functions exactly
w = trapezoid_weights(grid)
print("integral of s^2 on [0, 1] by trapezoid:", w @ grid**2)
