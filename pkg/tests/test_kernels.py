"""Kernels, Gram matrices and the pivoted Cholesky factor."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covshift.errors import ConfigError, FactorizationError
from covshift.kernels import KernelSpec, as_points, certify_psd, gram_matrix, pivoted_cholesky

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


class TestGramMatrix:
    def test_rbf_unit_diagonal(self, rng):
        g = gram_matrix(KernelSpec.rbf(0.7), rng.standard_normal((12, 3)))
        np.testing.assert_array_equal(np.diag(g), np.ones(12))

    def test_linear_orthonormal(self):
        g = gram_matrix(KernelSpec.linear(), np.eye(2))
        np.testing.assert_array_equal(g, [[1.0, 0.0], [0.0, 1.0]])

    def test_polynomial_scalars(self):
        # (x x' + 1)^2 evaluated by hand
        g = gram_matrix(KernelSpec.polynomial(2, 1.0), [1.0, 2.0])
        np.testing.assert_allclose(g, [[4.0, 9.0], [9.0, 25.0]])

    def test_rbf_matches_direct_formula(self, rng):
        a, b = rng.standard_normal((4, 2)), rng.standard_normal((5, 2))
        k = KernelSpec.rbf(1.3)(a, b)
        direct = np.exp(-((a[:, None, :] - b[None, :, :]) ** 2).sum(-1) / (2 * 1.3**2))
        np.testing.assert_allclose(k, direct, rtol=1e-12)

    def test_non_psd_rejected(self):
        with pytest.raises(FactorizationError):
            certify_psd(np.array([[1.0, 3.0], [3.0, 1.0]]))

    def test_bad_specs(self):
        with pytest.raises(ConfigError):
            KernelSpec("laplace")
        with pytest.raises(ConfigError):
            KernelSpec.rbf(0.0)
        with pytest.raises(ConfigError):
            KernelSpec.polynomial(0)
        with pytest.raises(ConfigError):
            KernelSpec.from_dict({"kind": "rbf", "width": 1.0})

    def test_dict_round_trip(self):
        for k in (KernelSpec.rbf(0.3), KernelSpec.linear(), KernelSpec.polynomial(3, 0.5)):
            assert KernelSpec.from_dict(k.to_dict()) == k

    def test_as_points_shapes(self):
        assert as_points(2.0).shape == (1, 1)
        assert as_points([1.0, 2.0, 3.0]).shape == (3, 1)
        with pytest.raises(ValueError):
            as_points(np.zeros((2, 2, 2)))


class TestPivotedCholesky:
    @given(arrays(float, (15, 2), elements=finite), st.floats(0.2, 3.0))
    def test_reconstructs_rbf_gram(self, x, bw):
        kern = KernelSpec.rbf(bw)
        fac = pivoted_cholesky(kern, x, tol=1e-10)
        g = kern(x, x)
        assert np.max(np.abs(g - fac.factor @ fac.factor.T)) <= 1e-9

    def test_linear_rank_is_dimension(self, rng):
        x = rng.standard_normal((50, 3))
        fac = pivoted_cholesky(KernelSpec.linear(), x)
        assert fac.rank == 3
        np.testing.assert_allclose(fac.factor @ fac.factor.T, x @ x.T, atol=1e-9)

    def test_pivot_block_triangular(self, rng):
        fac = pivoted_cholesky(KernelSpec.rbf(1.0), rng.standard_normal((40, 1)))
        blk = fac.pivot_block()
        np.testing.assert_array_equal(blk, np.tril(blk))

    def test_coefficients_reproduce_predictions_and_norm(self, rng):
        x = rng.standard_normal((60, 2))
        kern = KernelSpec.rbf(1.0)
        fac = pivoted_cholesky(kern, x)
        w = rng.standard_normal(fac.rank)
        gam = fac.coefficients(w)
        xp = x[fac.pivots]
        np.testing.assert_allclose(kern(x, xp) @ gam, fac.factor @ w, atol=1e-6)
        np.testing.assert_allclose(gam @ kern(xp, xp) @ gam, w @ w, rtol=1e-6)

    def test_zero_points_give_rank_zero(self):
        fac = pivoted_cholesky(KernelSpec.linear(), np.zeros((5, 2)))
        assert fac.rank == 0
        assert fac.coefficients(np.zeros(0)).size == 0

    def test_max_rank_too_small(self, rng):
        with pytest.raises(FactorizationError):
            pivoted_cholesky(KernelSpec.rbf(0.1), rng.standard_normal((30, 1)), max_rank=2)
