"""Importance-weight models ``r(x) ~ p_te(x) / p_tr(x)``.

Sign convention
---------------
Classification data label test draws ``y = +1`` and training draws
``y = -1``. A classifier score ``g(x)`` models

    Pr[y | x] = 1 / (1 + exp(-y * g(x)))

so at the Bayes optimum ``g(x) = ln(p_te(x) / p_tr(x))`` and the ratio is
``r(x) = exp(g(x))``. For exponential families ``g(x) = <theta, T(x)> + s``
with ``theta = theta_te - theta_tr`` and ``s = A(theta_tr) - A(theta_te)``.
The RKHS variant writes the log-ratio the other way round,
``theta(x) = ln(p_tr / p_te)``; here that is simply ``-g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from covshift.distributions import GaussianModel, log_density_ratio_gaussian
from covshift.errors import ConfigError
from covshift.kernels import KernelSpec, as_points, pivoted_cholesky
from covshift.optim import project_ball, projected_gradient

Q_MIN = 1e-12


class ClampCounter:
    """Counts probability clamps made by :func:`ratio_from_classifier_prob`."""

    def __init__(self):
        self.count = 0

    def __repr__(self):
        return f"ClampCounter(count={self.count})"


def ratio_from_classifier_prob(q, counter: ClampCounter | None = None):
    """Invert ``q = Pr(y = -1 | x)`` into the density ratio ``1/q - 1``.

    ``q`` is clamped to ``[Q_MIN, 1 - Q_MIN]`` first; each clamped entry
    increments ``counter``.
    """
    q_arr = np.asarray(q, dtype=float)
    if np.any(np.isnan(q_arr)):
        raise ValueError("classifier probability is NaN")
    if np.any((q_arr < 0) | (q_arr > 1)):
        raise ValueError("classifier probability outside [0, 1]")
    clamped = np.clip(q_arr, Q_MIN, 1.0 - Q_MIN)
    if counter is not None:
        counter.count += int(np.count_nonzero(clamped != q_arr))
    r = 1.0 / clamped - 1.0
    return float(r) if np.ndim(r) == 0 else r


# ---------------------------------------------------------------------------
# Logistic regression


def nll_loss_grad(theta, intercept, z, y):
    """Average logistic NLL ``mean(ln(1 + exp(-y (z theta + s))))`` and its gradient.

    Returns ``(loss, grad_theta, grad_intercept)``.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.shape[0] == 0:
        raise ValueError("empty dataset")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite features")
    margin = y * (z @ theta + intercept)
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    w = -y * expit(-margin) / z.shape[0]
    return loss, z.T @ w, float(w.sum())


@dataclass(frozen=True, eq=False)
class LogisticModel:
    theta: np.ndarray
    intercept: float
    norm_bound: float
    diagnostics: dict = field(default_factory=dict)

    def score(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1) if self.theta.size == 1 else z.reshape(1, -1)
        return z @ self.theta + self.intercept

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "intercept": self.intercept,
            "norm_bound": self.norm_bound,
            "diagnostics": _plain(self.diagnostics),
        }


def _check_labels(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("labels must be +1 or -1")
    return y


def _newton_solve(z, y, lam, v0, fit_intercept, iters=50):
    """Damped Newton on ``NLL + lam/2 ||theta||^2``; returns ``(v, converged)``."""
    n, dim = z.shape
    zz = np.column_stack([z, np.ones(n)]) if fit_intercept else z
    reg = np.full(zz.shape[1], lam)
    if fit_intercept:
        reg[-1] = 0.0
    v = v0.copy()

    def obj(u):
        return float(np.mean(np.logaddexp(0.0, -y * (zz @ u)))) + 0.5 * float(reg @ (u * u))

    f = obj(v)
    for _ in range(iters):
        margin = y * (zz @ v)
        p = expit(-margin)
        g = zz.T @ (-y * p) / n + reg * v
        h = (zz.T * (p * (1.0 - p))) @ zz / n + np.diag(reg)
        h[np.diag_indices_from(h)] += 1e-14 * max(1.0, float(np.trace(h)))
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        dec = float(g @ step)
        if not np.isfinite(dec) or dec < 0:
            return v, False
        # the decrement is ~2(f - f*); below 1e-14 the loss is flat at float resolution
        if dec < 1e-14:
            return v, True
        a = 1.0
        while a > 1e-10:
            cand = v - a * step
            fc = obj(cand)
            if fc <= f - 1e-4 * a * dec:
                break
            a *= 0.5
        else:
            return v, dec < 1e-10
        v, f = cand, fc
        if not np.all(np.isfinite(v)) or np.linalg.norm(v) > 1e8:
            return v, False
    return v, False


def _newton_warm_start(z, y, norm_bound, fit_intercept):
    """Approximate minimizer over the ball via the multiplier of ``||theta|| <= B``.

    ``theta(lam)`` minimizes ``NLL + lam/2 ||theta||^2`` and its norm
    decreases in ``lam``; bisection on ``log lam`` finds the boundary point
    when the unconstrained minimizer lies outside the ball.
    """
    dim = z.shape[1]
    size = dim + (1 if fit_intercept else 0)
    v, ok = _newton_solve(z, y, 0.0, np.zeros(size), fit_intercept)
    if ok and np.linalg.norm(v[:dim]) <= norm_bound:
        return v
    lo, hi = -30.0, 10.0
    best = np.zeros(size)
    warm = np.zeros(size)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        cand, ok = _newton_solve(z, y, math.exp(mid), warm, fit_intercept)
        if ok and np.linalg.norm(cand[:dim]) <= norm_bound:
            best, hi, warm = cand, mid, cand
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return best


def train_logistic(z, y, norm_bound=10.0, tol=1e-8, max_iters=50_000,
                   fit_intercept=True, keep_history=False, warm_start=True) -> LogisticModel:
    """Constrained logistic regression by projected gradient.

    Minimizes the average NLL over ``{||theta|| <= B, |s| <= B}`` (``s = 0``
    when ``fit_intercept`` is off). The result is flagged ``converged`` when
    the projected-gradient norm drops below ``tol``; otherwise the last
    iterate is returned with ``converged=False``.

    With ``warm_start`` the projected-gradient run starts from a Newton
    solution of the multiplier problem, which matters for the badly scaled
    features produced by kernel factorizations. Without it the run starts
    at zero.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    y = _check_labels(y)
    if z.shape[0] != y.shape[0]:
        raise ValueError("features and labels differ in length")
    if not (np.any(y == 1) and np.any(y == -1)):
        raise ValueError("both labels must be present")
    if norm_bound < 0:
        raise ConfigError("norm_bound must be >= 0")
    dim = z.shape[1]

    def fun_grad(v):
        loss, gt, gs = nll_loss_grad(v[:dim], v[dim] if fit_intercept else 0.0, z, y)
        if fit_intercept:
            return loss, np.append(gt, gs)
        return loss, gt

    def project(v):
        out = v.copy()
        out[:dim] = project_ball(v[:dim], norm_bound)
        if fit_intercept:
            out[dim] = np.clip(v[dim], -norm_bound, norm_bound)
        return out

    x0 = np.zeros(dim + (1 if fit_intercept else 0))
    if warm_start and norm_bound > 0:
        x0 = project(_newton_warm_start(z, y, norm_bound, fit_intercept))
    res = projected_gradient(fun_grad, x0, project, tol=tol, max_iters=max_iters,
                             keep_history=keep_history)
    diag = {"n_iter": res.n_iter, "loss": res.fun, "converged": res.converged,
            "pg_norm": res.pg_norm, "n": int(z.shape[0])}
    if keep_history:
        diag["history"] = res.history
    theta = res.x[:dim].copy()
    theta.setflags(write=False)
    return LogisticModel(theta, float(res.x[dim]) if fit_intercept else 0.0,
                         float(norm_bound), diag)


# ---------------------------------------------------------------------------
# Kernel logistic regression


@dataclass(frozen=True, eq=False)
class KernelLogisticModel:
    """Score ``g(x) = sum_i gammas[i] K(support_points[i], x) + intercept``."""

    support_points: np.ndarray
    gammas: np.ndarray
    kernel: KernelSpec
    intercept: float = 0.0
    rkhs_norm_bound: float = 1.0
    diagnostics: dict = field(default_factory=dict)

    def score(self, x) -> np.ndarray:
        x = as_points(x)
        if self.gammas.size == 0:
            return np.full(x.shape[0], self.intercept)
        return self.kernel(x, self.support_points) @ self.gammas + self.intercept

    def rkhs_norm(self) -> float:
        if self.gammas.size == 0:
            return 0.0
        k = self.kernel(self.support_points, self.support_points)
        return math.sqrt(max(float(self.gammas @ k @ self.gammas), 0.0))

    def to_dict(self) -> dict:
        return {
            "support_points": self.support_points.tolist(),
            "gammas": self.gammas.tolist(),
            "kernel": self.kernel.to_dict(),
            "intercept": self.intercept,
            "rkhs_norm_bound": self.rkhs_norm_bound,
            "diagnostics": _plain(self.diagnostics),
        }


def train_kernel_logistic(x, y, kernel: KernelSpec, rkhs_norm_bound=1.0, tol=1e-8,
                          max_iters=50_000, fit_intercept=False, factor_tol=1e-10):
    """Kernel logistic regression over the RKHS ball ``{||g||_H <= B}``.

    By the representer theorem the minimizer is ``sum_i gamma_i K(x_i, .)``
    with ``gamma^T K gamma <= B^2``. With the pivoted Cholesky factor
    ``K = L L^T`` and ``w = L^T gamma`` the problem becomes plain logistic
    regression on the rows of ``L`` over ``{||w|| <= B}``, and the projection
    ``gamma <- gamma * B / sqrt(gamma^T K gamma)`` is the rescaling of ``w``.
    Only the pivot points carry nonzero ``gamma``.
    """
    x = as_points(x)
    y = _check_labels(y)
    fac = pivoted_cholesky(kernel, x, tol=factor_tol)
    if fac.rank == 0 or rkhs_norm_bound == 0:
        w = np.zeros(fac.rank)
        if fit_intercept:
            lm = train_logistic(np.zeros((x.shape[0], 1)), y, norm_bound=rkhs_norm_bound,
                                tol=tol, max_iters=max_iters, fit_intercept=True)
            intercept, diag = lm.intercept, dict(lm.diagnostics)
        else:
            intercept = 0.0
            margin = np.zeros(x.shape[0])
            diag = {"n_iter": 0, "loss": float(np.mean(np.logaddexp(0.0, -margin))),
                    "converged": True, "pg_norm": 0.0, "n": int(x.shape[0])}
    else:
        lm = train_logistic(fac.factor, y, norm_bound=rkhs_norm_bound, tol=tol,
                            max_iters=max_iters, fit_intercept=fit_intercept)
        w, intercept, diag = lm.theta, lm.intercept, dict(lm.diagnostics)
    gammas = fac.coefficients(w)
    support = x[fac.pivots].copy()
    support.setflags(write=False)
    gammas.setflags(write=False)
    diag.update({"rank": fac.rank, "factor_residual": fac.residual,
                 "w_norm": float(np.linalg.norm(w))})
    return KernelLogisticModel(support, gammas, kernel, float(intercept),
                               float(rkhs_norm_bound), diag)


# ---------------------------------------------------------------------------
# Ratio models


class DensityRatioModel:
    """Evaluable nonnegative weight function ``r(x)``."""

    variant = "abstract"

    def log_ratio(self, x) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return np.exp(self.log_ratio(x))

    def classifier_prob(self, x) -> np.ndarray:
        """Implied ``Pr(y = -1 | x) = 1 / (1 + r(x))``."""
        return expit(-self.log_ratio(x))


class GaussianRatio(DensityRatioModel):
    variant = "gaussian"

    def __init__(self, num: GaussianModel, den: GaussianModel):
        self.num, self.den = num, den

    def log_ratio(self, x):
        return log_density_ratio_gaussian(self.num, self.den, x)

    def to_dict(self):
        return {"variant": self.variant, "num": self.num.to_dict(), "den": self.den.to_dict()}


def identity_features(x):
    return as_points(x)


class LogisticRatio(DensityRatioModel):
    variant = "logistic"

    def __init__(self, model: LogisticModel, feature_map: Callable = identity_features):
        self.model, self.feature_map = model, feature_map

    def log_ratio(self, x):
        return self.model.score(self.feature_map(x))

    def to_dict(self):
        if self.feature_map is not identity_features:
            raise ConfigError("only identity feature maps can be serialized")
        return {"variant": self.variant, "model": self.model.to_dict(), "features": "identity"}


class KernelLogisticRatio(DensityRatioModel):
    variant = "kernel_logistic"

    def __init__(self, model: KernelLogisticModel):
        self.model = model

    def log_ratio(self, x):
        return self.model.score(x)

    def to_dict(self):
        return {"variant": self.variant, "model": self.model.to_dict()}


class ExactRatio(DensityRatioModel):
    """Ratio of two known densities, or any user closure returning ``ln r(x)``."""

    variant = "exact"

    def __init__(self, num=None, den=None, log_ratio_fn: Callable | None = None):
        if log_ratio_fn is None and (num is None or den is None):
            raise ConfigError("ExactRatio needs num and den, or log_ratio_fn")
        self.num, self.den, self._fn = num, den, log_ratio_fn

    def log_ratio(self, x):
        if self._fn is not None:
            return np.asarray(self._fn(x), dtype=float)
        with np.errstate(invalid="ignore"):
            out = self.num.log_density(x) - self.den.log_density(x)
        return np.where(np.isnan(out), -np.inf, out)

    def to_dict(self):
        if self._fn is not None:
            raise ConfigError("closure-based ExactRatio cannot be serialized")
        return {"variant": self.variant, "num": self.num.to_dict(), "den": self.den.to_dict()}


class ConstantRatio(DensityRatioModel):
    variant = "constant"

    def __init__(self, value=1.0):
        if value <= 0:
            raise ConfigError("constant ratio must be positive")
        self.value = float(value)

    def log_ratio(self, x):
        return np.full(as_points(x).shape[0], math.log(self.value))

    def __call__(self, x):
        # exact value, so that r == B survives truncation
        return np.full(as_points(x).shape[0], self.value)

    def to_dict(self):
        return {"variant": self.variant, "value": self.value}


class TruncatedRatio(DensityRatioModel):
    """Zeroes the wrapped ratio wherever it exceeds ``bound``; ``r == bound`` is kept."""

    variant = "truncated"

    def __init__(self, inner: DensityRatioModel, bound: float):
        if not bound > 0:
            raise ConfigError("truncation bound must be positive")
        self.inner, self.bound = inner, float(bound)

    def evaluate(self, x):
        """Return ``(weights, truncated_mask)``."""
        r = self.inner(x)
        mask = r > self.bound
        return np.where(mask, 0.0, r), mask

    def __call__(self, x):
        return self.evaluate(x)[0]

    def log_ratio(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self(x))

    def to_dict(self):
        return {"variant": self.variant, "bound": self.bound, "inner": self.inner.to_dict()}


def evaluate_log_ratio(model: DensityRatioModel, x) -> np.ndarray:
    return model.log_ratio(x)


def truncate_ratio(model: DensityRatioModel, bound: float) -> TruncatedRatio:
    return TruncatedRatio(model, bound)


def ratio_model_from_dict(d: dict) -> DensityRatioModel:
    from covshift.distributions import model_from_dict

    d = dict(d)
    variant = d.pop("variant", None)
    if variant == "gaussian":
        return GaussianRatio(model_from_dict(d["num"]), model_from_dict(d["den"]))
    if variant == "exact":
        return ExactRatio(model_from_dict(d["num"]), model_from_dict(d["den"]))
    if variant == "constant":
        return ConstantRatio(d["value"])
    if variant == "truncated":
        return TruncatedRatio(ratio_model_from_dict(d["inner"]), d["bound"])
    if variant == "logistic":
        m = d["model"]
        lm = LogisticModel(np.asarray(m["theta"], dtype=float), float(m["intercept"]),
                           float(m["norm_bound"]), m.get("diagnostics", {}))
        return LogisticRatio(lm)
    if variant == "kernel_logistic":
        m = d["model"]
        km = KernelLogisticModel(as_points(m["support_points"]), np.asarray(m["gammas"], float),
                                 KernelSpec.from_dict(m["kernel"]), float(m["intercept"]),
                                 float(m["rkhs_norm_bound"]), m.get("diagnostics", {}))
        return KernelLogisticRatio(km)
    raise ConfigError(f"unknown ratio model variant {variant!r}")


def _plain(obj):
    """Make diagnostics JSON-friendly."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
