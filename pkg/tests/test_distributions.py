"""Gaussian fitting, densities, samplers and divergences."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from covshift.distributions import (
    DiscreteModel,
    GaussianModel,
    RkhsReweightedModel,
    UniformBox,
    fit_gaussian,
    gaussian_mean_family,
    kl_gaussian,
    log_density,
    log_density_ratio_gaussian,
    model_from_dict,
    q_divergence_mc,
    renyi_r2_mc,
    sample,
    tv_distance_mc,
    tv_upper_pinsker,
)
from covshift.errors import ConfigError, SamplingError
from covshift.kernels import KernelSpec

N01 = GaussianModel([0.0], [[1.0]])


def gauss1(mu, var=1.0):
    return GaussianModel([mu], [[var]])


class TestFitGaussian:
    def test_constant_samples(self):
        v = np.array([0.3, -1.2, 2.0])
        m = fit_gaussian(np.tile(v, (10, 1)))
        np.testing.assert_array_equal(m.mean, v)
        np.testing.assert_array_equal(m.cov, np.zeros((3, 3)))

    def test_four_point_hand_example(self):
        m = fit_gaussian([[0, 0], [2, 0], [0, 2], [2, 2]])
        np.testing.assert_allclose(m.mean, [1.0, 0.0])
        np.testing.assert_allclose(m.cov, [[2.0, 0.0], [0.0, 0.0]])

    def test_isotropic_ignores_data(self, rng):
        m = fit_gaussian(rng.standard_normal((40, 3)) * 7, isotropic=True)
        np.testing.assert_array_equal(m.cov, np.eye(3))

    def test_odd_sample_dropped(self, rng):
        m = fit_gaussian(rng.standard_normal((11, 2)))
        assert m.info["dropped"] == 1 and m.info["n_used"] == 10

    def test_covariance_concentration(self):
        hits = 0
        for seed in range(100):
            x = np.random.default_rng(seed).standard_normal((20_000, 2))
            hits += np.linalg.norm(fit_gaussian(x).cov - np.eye(2), 2) <= 0.1
        assert hits >= 95

    @given(arrays(float, (30, 3), elements=st.floats(-50, 50, allow_nan=False)))
    def test_fitted_covariance_is_psd(self, x):
        cov = fit_gaussian(x).cov
        np.testing.assert_array_equal(cov, cov.T)
        scale = max(1.0, float(np.abs(cov).max()))
        assert np.linalg.eigvalsh(cov).min() >= -1e-12 * scale

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            fit_gaussian(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            fit_gaussian([[np.nan], [1.0]])


class TestLogDensity:
    def test_standard_normal_mode(self):
        assert log_density(N01, 0.0)[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert log_density(N01, 0.0)[0] == pytest.approx(-0.918939, abs=1e-6)

    def test_two_dim_origin(self):
        m = GaussianModel([0.0, 0.0], np.eye(2))
        assert log_density(m, [0.0, 0.0])[0] == pytest.approx(-1.837877, abs=1e-6)

    def test_shifted_mean(self):
        assert log_density(gauss1(1.0), 0.0)[0] == pytest.approx(-1.418939, abs=1e-6)

    def test_against_scipy(self, rng):
        a = rng.standard_normal((4, 4))
        cov = a @ a.T + 0.5 * np.eye(4)
        mu = rng.standard_normal(4)
        x = rng.standard_normal((20, 4))
        ref = stats.multivariate_normal(mu, cov).logpdf(x)
        np.testing.assert_allclose(GaussianModel(mu, cov).log_density(x), ref, rtol=1e-10)

    def test_singular_covariance_gets_jitter(self):
        m = GaussianModel([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
        assert np.isfinite(m.log_density([0.0, 0.0])[0])
        assert m.jitter > 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            GaussianModel([0.0, 0.0]).log_density(np.zeros((3, 3)))


class TestLogRatio:
    def test_identical_models(self, rng):
        m = GaussianModel([0.2, 0.1], [[2.0, 0.3], [0.3, 1.0]])
        x = rng.standard_normal((10, 2))
        np.testing.assert_allclose(log_density_ratio_gaussian(m, m, x), 0.0, atol=1e-13)

    def test_unit_shift(self):
        lr = log_density_ratio_gaussian(gauss1(1.0), N01, [0.0, 0.5])
        np.testing.assert_allclose(lr, [-0.5, 0.0], atol=1e-13)
        assert math.exp(lr[0]) == pytest.approx(0.60653, abs=1e-5)

    def test_equals_density_difference(self, rng):
        p, q = GaussianModel([1.0, 0.0], [[1.5, 0.2], [0.2, 0.7]]), GaussianModel([0, 0])
        x = rng.standard_normal((15, 2))
        np.testing.assert_allclose(log_density_ratio_gaussian(p, q, x),
                                   p.log_density(x) - q.log_density(x), atol=1e-12)


class TestSampling:
    def test_empty(self):
        assert sample(N01, 0, seed=1).shape == (0, 1)

    def test_mean_of_million(self):
        assert abs(sample(N01, 1_000_000, seed=3).mean()) <= 0.005

    def test_seed_determinism(self):
        np.testing.assert_array_equal(sample(N01, 5, seed=9), sample(N01, 5, seed=9))

    def test_null_reweighting_matches_base(self):
        bound = 0.7
        m = RkhsReweightedModel(N01, KernelSpec.rbf(1.0), [[0.0]], [0.0], bound)
        xs, acc = m.sample_with_stats(100_000, seed=4)
        assert acc == pytest.approx(math.exp(-bound), abs=0.01)
        assert stats.kstest(xs[:, 0], "norm").statistic <= 0.01

    def test_reweighted_density_integrates_to_one(self):
        m = RkhsReweightedModel(N01, KernelSpec.rbf(1.0), [[0.0]], [-0.8], 0.8)
        val, _ = integrate.quad(lambda t: math.exp(m.log_density([[t]])[0]), -15, 15)
        assert val == pytest.approx(1.0, abs=1e-9)

    def test_hopeless_rejection_raises(self):
        m = RkhsReweightedModel(N01, KernelSpec.rbf(1.0), [[0.0]], [0.0], 30.0)
        with pytest.raises(SamplingError):
            m.sample(10, seed=0)

    def test_discrete_and_uniform(self):
        d = DiscreteModel([[0.0], [1.0]], [0.25, 0.75])
        x = d.sample(40_000, seed=2)
        assert x.mean() == pytest.approx(0.75, abs=0.01)
        np.testing.assert_allclose(np.exp(d.log_density([[0.0], [1.0]])), [0.25, 0.75])
        assert d.log_density([[0.5]])[0] == -np.inf
        u = UniformBox([0.0, 0.0], [2.0, 1.0])
        assert u.log_density([[1.0, 0.5]])[0] == pytest.approx(-math.log(2.0))
        with pytest.raises(ConfigError):
            DiscreteModel([[0.0]], [0.5])


class TestKl:
    def test_identical(self):
        assert kl_gaussian(N01, N01) == pytest.approx(0.0, abs=1e-14)

    def test_unit_shift_with_mc_crosscheck(self):
        p, q = N01, gauss1(1.0)
        assert kl_gaussian(p, q) == pytest.approx(0.5, abs=1e-12)
        xs = p.sample(1_000_000, seed=5)
        mc = float(np.mean(p.log_density(xs) - q.log_density(xs)))
        assert mc == pytest.approx(0.5, abs=0.01)

    def test_scale_mismatch(self):
        val = kl_gaussian(GaussianModel([0.0], [[4.0]]), N01)
        assert val == pytest.approx(0.5 * (4 - 1 + math.log(0.25)), abs=1e-12)
        assert val == pytest.approx(0.806853, abs=1e-6)

    @given(st.floats(-2, 2), st.floats(0.2, 5), st.floats(-2, 2), st.floats(0.2, 5))
    def test_nonnegative(self, m1, v1, m2, v2):
        assert kl_gaussian(gauss1(m1, v1), gauss1(m2, v2)) >= -1e-10


class TestPinsker:
    def test_examples(self):
        assert tv_upper_pinsker(N01, N01) == 0.0
        assert tv_upper_pinsker(N01, gauss1(1.0)) == pytest.approx(1.0)
        assert tv_upper_pinsker(N01, gauss1(0.1)) == pytest.approx(0.1, rel=1e-9)

    def test_dominates_mc_tv(self):
        p, q = N01, gauss1(0.3)
        est = tv_distance_mc(p, q, 200_000, seed=1)
        exact = 2 * stats.norm.cdf(0.15) - 1
        assert est.value == pytest.approx(exact, abs=4 * est.stderr + 1e-3)
        assert tv_upper_pinsker(p, q) >= exact


class TestQDivergence:
    def test_identical_models_give_zero(self):
        assert q_divergence_mc(1, N01, N01, gauss1(0.3), 1000, seed=0).value == 0.0

    def test_against_quadrature(self):
        p_hat, p, q = gauss1(0.1), N01, N01

        def integrand(t):
            return abs(math.exp(p.log_density([[t]])[0] - p_hat.log_density([[t]])[0]) - 1) \
                * math.exp(q.log_density([[t]])[0])

        ref, _ = integrate.quad(integrand, -10, 10, limit=200)
        q1 = q_divergence_mc(1, p_hat, p, q, 1_000_000, seed=6)
        assert q1.value == pytest.approx(ref, abs=0.01)
        q2 = q_divergence_mc(2, p_hat, p, q, 1_000_000, seed=6)
        assert q2.value >= q1.value - 0.005

    def test_order_below_one_rejected(self):
        with pytest.raises(ValueError):
            q_divergence_mc(0.5, N01, N01, N01, 10)


class TestRenyi:
    def test_identical(self):
        assert renyi_r2_mc(N01, N01, 1_000_000, seed=0).value == pytest.approx(1.0, abs=0.01)

    def test_half_shift_matches_quadrature(self):
        p1 = gauss1(0.5)
        ref, _ = integrate.quad(lambda t: math.exp(2 * p1.log_density([[t]])[0]
                                                   - N01.log_density([[t]])[0]), -20, 20)
        # E_{N(0,1)} exp(2 (d x - d^2 / 2)) = exp(d^2) with d = 0.5
        assert ref == pytest.approx(math.exp(0.25), rel=1e-9)
        est = renyi_r2_mc(p1, N01, 1_000_000, seed=7)
        assert est.value == pytest.approx(ref, rel=0.03)
        assert est.flags == ()

    def test_heavy_ratio_flagged(self):
        est = renyi_r2_mc(gauss1(3.0), N01, 10_000, seed=1)
        assert np.isfinite(est.value)
        assert "high_variance" in est.flags


class TestExponentialFamily:
    def test_gaussian_mean_family_density(self, rng):
        cov = np.array([[1.0, 0.3], [0.3, 2.0]])
        theta = np.array([0.4, -0.2])
        fam = gaussian_mean_family(cov, theta)
        x = rng.standard_normal((10, 2))
        ref = stats.multivariate_normal(cov @ theta, cov).logpdf(x)
        np.testing.assert_allclose(fam.log_density(x), ref, rtol=1e-10)
        assert fam.sample(50_000, seed=1).mean(axis=0) == pytest.approx(cov @ theta, abs=0.03)


class TestSerialization:
    def test_round_trip(self):
        models = [
            GaussianModel([0.5, 1.0], [[1.0, 0.1], [0.1, 2.0]]),
            GaussianModel([0.0, 0.0], isotropic=True),
            UniformBox([0.0], [1.0]),
            DiscreteModel([[0.0], [1.0]], [0.5, 0.5]),
            RkhsReweightedModel(N01, KernelSpec.rbf(0.5), [[0.0]], [-0.3], 0.3),
        ]
        x = np.array([[0.0, 0.2], [1.0, -0.3]])
        for m in models:
            back = model_from_dict(m.to_dict())
            assert back.to_dict() == m.to_dict()
            pts = x[:, : m.dim]
            np.testing.assert_allclose(back.log_density(pts), m.log_density(pts))

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            model_from_dict({"kind": "gaussian", "mean": [0.0], "colour": 1})
