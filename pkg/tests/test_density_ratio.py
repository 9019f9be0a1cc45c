"""Classifier link, logistic losses and trainers, and ratio model wrappers."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize
from scipy.special import expit

from covshift.density_ratio import (
    Q_MIN,
    ClampCounter,
    ConstantRatio,
    ExactRatio,
    GaussianRatio,
    KernelLogisticRatio,
    LogisticModel,
    LogisticRatio,
    TruncatedRatio,
    nll_loss_grad,
    ratio_from_classifier_prob,
    ratio_model_from_dict,
    train_kernel_logistic,
    train_logistic,
    truncate_ratio,
)
from covshift.distributions import GaussianModel, RkhsReweightedModel
from covshift.errors import ConfigError
from covshift.kernels import KernelSpec


def two_gaussians(n, d, seed, half_shift=0.5):
    rng = np.random.default_rng(seed)
    mu = np.zeros(d)
    mu[0] = half_shift
    z = np.concatenate([rng.standard_normal((n, d)) - mu, rng.standard_normal((n, d)) + mu])
    y = np.concatenate([-np.ones(n), np.ones(n)])
    return z, y


def random_instance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    z = rng.standard_normal((50, d)) * rng.uniform(0.5, 3)
    y = rng.choice([-1.0, 1.0], 50)
    return rng.standard_normal(d), float(rng.standard_normal()), z, y


class TestLink:
    def test_examples(self):
        assert ratio_from_classifier_prob(0.5) == 1.0
        assert ratio_from_classifier_prob(0.2) == pytest.approx(4.0, rel=1e-15)

    def test_clamp_counted(self):
        c = ClampCounter()
        r = ratio_from_classifier_prob(np.array([0.0, 1.0, 0.3]), c)
        assert c.count == 2
        assert r[0] == pytest.approx(1 / Q_MIN - 1)
        assert r[1] == pytest.approx(Q_MIN / (1 - Q_MIN), rel=1e-3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ratio_from_classifier_prob(np.nan)
        with pytest.raises(ValueError):
            ratio_from_classifier_prob(1.5)

    @given(st.floats(1e-8, 1e8))
    def test_round_trip(self, r):
        q = 1.0 / (1.0 + r)
        assert ratio_from_classifier_prob(q) == pytest.approx(r, rel=1e-10)

    @given(st.floats(-15, 15))
    def test_model_probability_consistent(self, g):
        ratio = ExactRatio(log_ratio_fn=lambda x: np.full(len(x), g))
        q = ratio.classifier_prob([[0.0]])[0]
        assert ratio_from_classifier_prob(q) == pytest.approx(math.exp(g), rel=1e-10)


class TestNll:
    def test_zero_parameters(self, rng):
        z = rng.standard_normal((30, 3))
        y = rng.choice([-1.0, 1.0], 30)
        loss, gt, gs = nll_loss_grad(np.zeros(3), 0.0, z, y)
        assert loss == pytest.approx(math.log(2.0), abs=1e-15)
        assert gs == pytest.approx(-y.mean() / 2, abs=1e-15)

    def test_single_point(self):
        loss, _, _ = nll_loss_grad(np.array([10.0]), 0.0, np.array([[1.0]]), np.array([1.0]))
        assert loss == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
        assert loss == pytest.approx(4.5399e-5, rel=1e-4)

    def test_gradient_matches_central_differences(self):
        h = 1e-5
        for seed in range(100):
            theta, s, z, y = random_instance(seed)
            _, gt, gs = nll_loss_grad(theta, s, z, y)
            v = np.append(theta, s)
            num = np.empty_like(v)
            for i in range(v.size):
                e = np.zeros_like(v)
                e[i] = h
                fp = nll_loss_grad((v + e)[:-1], (v + e)[-1], z, y)[0]
                fm = nll_loss_grad((v - e)[:-1], (v - e)[-1], z, y)[0]
                num[i] = (fp - fm) / (2 * h)
            ana = np.append(gt, gs)
            assert np.linalg.norm(ana - num) <= 1e-5 * max(np.linalg.norm(num), 1e-3)

    def test_convex_along_segments(self):
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            _, _, z, y = random_instance(seed)
            d = z.shape[1]
            a, b = rng.standard_normal(d + 1) * 3, rng.standard_normal(d + 1) * 3
            fa = nll_loss_grad(a[:-1], a[-1], z, y)[0]
            fb = nll_loss_grad(b[:-1], b[-1], z, y)[0]
            for lam in np.linspace(0.05, 0.95, 7):
                c = lam * a + (1 - lam) * b
                fc = nll_loss_grad(c[:-1], c[-1], z, y)[0]
                assert fc <= lam * fa + (1 - lam) * fb + 1e-12

    def test_large_margins_are_finite(self):
        loss, gt, _ = nll_loss_grad(np.array([1e4]), 0.0, np.array([[1.0], [-1.0]]),
                                    np.array([-1.0, 1.0]))
        assert np.isfinite(loss) and np.all(np.isfinite(gt))


class TestTrainLogistic:
    def test_mean_shift_recovery(self):
        z, y = two_gaussians(10_000, 3, seed=1)
        m = train_logistic(z, y, norm_bound=10.0)
        # theta* = mu_te - mu_tr = e1; s* = (|mu_tr|^2 - |mu_te|^2) / 2 = 0
        assert m.diagnostics["converged"]
        assert np.linalg.norm(m.theta - np.eye(3)[0]) <= 0.2
        assert abs(m.intercept) <= 0.2

    def test_matches_unconstrained_optimizer(self):
        z, y = two_gaussians(2_000, 2, seed=2)

        def fg(v):
            loss, gt, gs = nll_loss_grad(v[:-1], v[-1], z, y)
            return loss, np.append(gt, gs)

        ref = optimize.minimize(fg, np.zeros(3), jac=True, method="BFGS", options={"gtol": 1e-12})
        m = train_logistic(z, y, norm_bound=10.0)
        np.testing.assert_allclose(np.append(m.theta, m.intercept), ref.x, atol=1e-5)

    def test_flipped_labels_negate(self):
        z, y = two_gaussians(3_000, 3, seed=3)
        a, b = train_logistic(z, y), train_logistic(z, -y)
        np.testing.assert_allclose(b.theta, -a.theta, atol=1e-8)
        assert b.intercept == pytest.approx(-a.intercept, abs=1e-8)

    def test_separable_hits_ball(self):
        z = np.array([[1.0, 0.0], [-1.0, 0.0]])
        m = train_logistic(z, np.array([1.0, -1.0]), norm_bound=1.0, fit_intercept=False)
        assert np.linalg.norm(m.theta) == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(m.theta, [1.0, 0.0], atol=1e-8)

    def test_constrained_optimum_matches_slsqp(self):
        z, y = two_gaussians(1_000, 2, seed=4, half_shift=1.5)
        m = train_logistic(z, y, norm_bound=0.5, fit_intercept=False)
        cons = [{"type": "ineq", "fun": lambda t: 0.25 - t @ t}]
        ref = optimize.minimize(lambda t: nll_loss_grad(t, 0.0, z, y)[0], np.zeros(2),
                                jac=lambda t: nll_loss_grad(t, 0.0, z, y)[1],
                                constraints=cons, method="SLSQP", options={"ftol": 1e-14})
        np.testing.assert_allclose(m.theta, ref.x, atol=1e-5)

    def test_cold_start_agrees_with_warm_start(self):
        z, y = two_gaussians(2_000, 2, seed=5)
        a = train_logistic(z, y, warm_start=True)
        b = train_logistic(z, y, warm_start=False)
        np.testing.assert_allclose(a.theta, b.theta, atol=1e-6)

    def test_iteration_cap_flags_nonconvergence(self):
        z, y = two_gaussians(2_000, 2, seed=6)
        m = train_logistic(z, y, max_iters=1, warm_start=False)
        assert not m.diagnostics["converged"]
        assert m.diagnostics["n_iter"] == 1

    def test_label_validation(self):
        with pytest.raises(ValueError):
            train_logistic(np.zeros((2, 1)), np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            train_logistic(np.zeros((2, 1)), np.array([1.0, 1.0]))


class TestKernelLogistic:
    def test_linear_kernel_matches_logistic(self):
        z, y = two_gaussians(1_000, 3, seed=7)
        km = train_kernel_logistic(z, y, KernelSpec.linear(), rkhs_norm_bound=10.0)
        lm = train_logistic(z, y, norm_bound=10.0, fit_intercept=False)
        assert km.diagnostics["converged"] and lm.diagnostics["converged"]
        np.testing.assert_allclose(km.score(z), lm.score(z), atol=1e-4)

    def test_zero_ball(self):
        x = np.random.default_rng(0).standard_normal((20, 1))
        km = train_kernel_logistic(x, np.ones(20), KernelSpec.rbf(1.0), rkhs_norm_bound=0.0)
        np.testing.assert_array_equal(km.gammas, 0.0)
        np.testing.assert_allclose(expit(km.score(x)), 0.5)

    def test_rkhs_norm_within_bound(self):
        z, y = two_gaussians(500, 1, seed=8, half_shift=2.0)
        km = train_kernel_logistic(z, y, KernelSpec.rbf(0.5), rkhs_norm_bound=0.7)
        assert km.rkhs_norm() <= 0.7 * (1 + 1e-6)

    def test_planted_rbf_regret(self):
        base = GaussianModel([0.0], [[1.0]])
        kern = KernelSpec.rbf(1.0)
        p_te = RkhsReweightedModel(base, kern, [[0.0]], [-0.8], 0.8)
        n = 20_000
        x = np.concatenate([base.sample(n, seed=1), p_te.sample(n, seed=2)])
        y = np.concatenate([-np.ones(n), np.ones(n)])
        planted = 0.8 * kern(x, np.array([[0.0]]))[:, 0]
        nll_planted = float(np.mean(np.logaddexp(0, -y * planted)))
        km = train_kernel_logistic(x, y, kern, rkhs_norm_bound=1.0)
        nll_fit = float(np.mean(np.logaddexp(0, -y * km.score(x))))
        assert nll_fit <= nll_planted + 0.01
        # with an intercept, compare against the exact log-ratio including its offset
        kmi = train_kernel_logistic(x, y, kern, rkhs_norm_bound=1.0, fit_intercept=True)
        exact = planted - p_te.log_normalizer
        nll_exact = float(np.mean(np.logaddexp(0, -y * exact)))
        nll_fit_i = float(np.mean(np.logaddexp(0, -y * kmi.score(x))))
        assert nll_fit_i <= nll_exact + 0.01


class TestRatioModels:
    def test_logistic_zero(self):
        r = LogisticRatio(LogisticModel(np.zeros(1), 0.0, 1.0))
        np.testing.assert_array_equal(r.log_ratio([[0.0], [3.0]]), [0.0, 0.0])
        np.testing.assert_array_equal(r([[2.0]]), [1.0])

    def test_logistic_affine(self):
        r = LogisticRatio(LogisticModel(np.array([1.0]), -0.5, 1.0))
        assert r.log_ratio([[0.0]])[0] == -0.5

    def test_gaussian_ratio_cross_module(self):
        r = GaussianRatio(GaussianModel([1.0], [[1.0]]), GaussianModel([0.0], [[1.0]]))
        assert r.log_ratio([[0.0]])[0] == pytest.approx(-0.5, abs=1e-14)

    def test_truncation_examples(self):
        assert truncate_ratio(ConstantRatio(0.5), 3.0)([[0.0]])[0] == 0.5
        w, mask = TruncatedRatio(ConstantRatio(4.0), 3.0).evaluate([[0.0]])
        assert w[0] == 0.0 and mask[0]
        w, mask = TruncatedRatio(ConstantRatio(3.0), 3.0).evaluate([[0.0]])
        assert w[0] == 3.0 and not mask[0]

    def test_exact_ratio_outside_support(self):
        from covshift.distributions import DiscreteModel

        p = DiscreteModel([[0.0], [1.0]], [1.0, 0.0])
        q = DiscreteModel([[0.0], [1.0]], [0.5, 0.5])
        np.testing.assert_allclose(ExactRatio(p, q)([[0.0], [1.0]]), [2.0, 0.0])

    def test_serialization_round_trip(self):
        x = np.linspace(-2, 2, 7).reshape(-1, 1)
        g = GaussianModel([0.3], [[1.2]])
        km = train_kernel_logistic(*two_gaussians(100, 1, 0), KernelSpec.rbf(1.0),
                                   rkhs_norm_bound=2.0)
        models = [
            GaussianRatio(g, GaussianModel([0.0], [[1.0]])),
            ExactRatio(g, GaussianModel([0.0], [[1.0]])),
            ConstantRatio(2.0),
            TruncatedRatio(ConstantRatio(2.0), 5.0),
            LogisticRatio(LogisticModel(np.array([0.7]), 0.1, 3.0)),
            KernelLogisticRatio(km),
        ]
        for m in models:
            back = ratio_model_from_dict(m.to_dict())
            np.testing.assert_allclose(back(x), m(x), rtol=1e-12)

    def test_closure_ratio_not_serializable(self):
        with pytest.raises(ConfigError):
            ExactRatio(log_ratio_fn=lambda x: x[:, 0]).to_dict()
        with pytest.raises(ConfigError):
            ratio_model_from_dict({"variant": "mystery"})
