"""Covariate-shifted mean estimators.

Every estimator returns an :class:`EstimateResult`. Labeled data are given
as two aligned arrays, points ``x`` (n, d) and values ``fx`` (n,), with
``|fx| <= 1`` enforced. Median-of-means batches are contiguous slices of the
labeled stream in arrival order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from covshift.density_ratio import (
    ConstantRatio,
    DensityRatioModel,
    GaussianRatio,
    KernelLogisticModel,
    KernelLogisticRatio,
    LogisticRatio,
    TruncatedRatio,
    _plain,
    identity_features,
    train_kernel_logistic,
    train_logistic,
)
from covshift.distributions import fit_gaussian
from covshift.errors import BoundedTargetError, ConfigError
from covshift.kernels import KernelSpec, as_points, pivoted_cholesky
from covshift.optim import project_ball, project_box_slab, projected_gradient

CSV_FIELDS = ("estimator", "scenario_id", "n", "seed", "Z", "truth", "abs_error",
              "truncated_count", "wall_ms")


@dataclass(frozen=True)
class EstimatorConfig:
    """Accuracy target, failure probability and explicit sample-budget constants.

    Unset ``batch_size`` and ``batch_count`` follow ``m = ceil(c_m / eps^2)``
    and ``t = ceil(c_t ln(1/delta))`` rounded up to odd. The fitting budget is
    ``K = ceil(c_K d^2 / eps^2)`` (``d`` instead of ``d^2`` when isotropic).
    """

    epsilon: float = 0.1
    delta: float = 0.35
    ratio_bound: float = 20.0
    batch_size: int | None = None
    batch_count: int | None = None
    c_K: float = 4.0
    c_m: float = 4.0
    c_t: float = 18.0
    norm_bound: float = 10.0
    truncate: bool = False
    boost: bool = False
    tol: float = 1e-8
    max_iters: int = 50_000

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.ratio_bound > 0:
            raise ConfigError("ratio_bound must be positive")
        for name in ("batch_size", "batch_count"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 1):
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("c_K", "c_m", "c_t"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def m(self) -> int:
        if self.batch_size is not None:
            return int(self.batch_size)
        return int(math.ceil(self.c_m / self.epsilon**2))

    @property
    def t(self) -> int:
        if self.batch_count is not None:
            return int(self.batch_count)
        t = int(math.ceil(self.c_t * math.log(1.0 / self.delta)))
        return t if t % 2 else t + 1

    def fit_budget(self, d: int, isotropic: bool = False) -> int:
        rate = d if isotropic else d * d
        return int(math.ceil(self.c_K * rate / self.epsilon**2))

    def with_overrides(self, **kw) -> "EstimatorConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class EstimateResult:
    value: float
    batch_means: tuple
    n_labeled_used: int
    n_unlabeled_used: int
    truncated_count: int = 0
    estimator: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "estimator": self.estimator,
            "value": self.value,
            "batch_means": list(self.batch_means),
            "n_labeled_used": self.n_labeled_used,
            "n_unlabeled_used": self.n_unlabeled_used,
            "truncated_count": self.truncated_count,
            "diagnostics": _plain(self.diagnostics),
        }

    def csv_row(self, scenario_id="", n=None, seed=None, truth=None, wall_ms=None) -> dict:
        err = abs(self.value - truth) if truth is not None else None
        return {
            "estimator": self.estimator, "scenario_id": scenario_id,
            "n": self.n_labeled_used if n is None else n, "seed": seed,
            "Z": self.value, "truth": truth, "abs_error": err,
            "truncated_count": self.truncated_count, "wall_ms": wall_ms,
        }


@dataclass(frozen=True)
class KmmConfig:
    """Kernel mean matching and naive plug-in settings.

    ``mean_match_tol`` defaults to ``1 / sqrt(n_tr)``. ``weight_lower`` is 0
    for standard KMM; raising it to ``weight_bound`` pins every weight.
    """

    kernel: KernelSpec = field(default_factory=KernelSpec)
    weight_bound: float = 20.0
    mean_match_tol: float | None = None
    weight_lower: float = 0.0
    f_norm_bound: float = 1.0
    tol: float = 1e-8
    max_iters: int = 5_000
    step_scale: float = 1.0

    def __post_init__(self):
        if not self.weight_bound > 0:
            raise ConfigError("weight_bound must be positive")
        if self.mean_match_tol is not None and not self.mean_match_tol >= 0:
            raise ConfigError("mean_match_tol must be >= 0")
        if not 0 <= self.weight_lower <= self.weight_bound:
            raise ConfigError("need 0 <= weight_lower <= weight_bound")
        if self.f_norm_bound < 0:
            raise ConfigError("f_norm_bound must be >= 0")


# ---------------------------------------------------------------------------
# Building blocks


def _check_bounded(fx) -> np.ndarray:
    fx = np.asarray(fx, dtype=float).ravel()
    bad = np.flatnonzero(~(np.abs(fx) <= 1.0))
    if bad.size:
        raise BoundedTargetError(bad)
    return fx


def _weighted_terms(x, fx, ratio):
    """Per-point ``Z_i = r(x_i) f(x_i)`` and the truncation mask."""
    fx = _check_bounded(fx)
    if fx.size == 0:
        raise ValueError("empty batch")
    if ratio is None:
        return fx, np.zeros(fx.size, dtype=bool)
    x = as_points(x)
    if x.shape[0] != fx.size:
        raise ValueError("points and values differ in length")
    if isinstance(ratio, TruncatedRatio):
        w, mask = ratio.evaluate(x)
    else:
        w, mask = ratio(x), np.zeros(fx.size, dtype=bool)
    return w * fx, mask


def weighted_batch_mean(x, fx, ratio: DensityRatioModel | None = None) -> float:
    """``(1/K) sum_i r(x_i) f(x_i)``; truncated points contribute zero.

    ``ratio=None`` is the identity weight and returns the plain mean of ``fx``.
    """
    z, _ = _weighted_terms(x, fx, ratio)
    return float(np.mean(z))


def median_of_means(batch_means) -> float:
    """Median with the even-count convention: average of the two middle values."""
    v = np.asarray(batch_means, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("median_of_means needs at least one value")
    if np.any(np.isnan(v)):
        raise ValueError("NaN batch mean")
    return float(np.median(v))


def _batched(z, m, t):
    """Means of ``t`` contiguous slices of length ``m``."""
    if m * t > z.size:
        raise ConfigError(f"labeled budget {z.size} is below m*t = {m}*{t} = {m * t}")
    return tuple(float(np.mean(z[i * m:(i + 1) * m])) for i in range(t))


def _run_batches(x, fx, ratio, m, t, name, diagnostics, n_unlabeled=0):
    x = as_points(x)
    z, mask = _weighted_terms(x, fx, ratio)
    used = m * t
    means = _batched(z, m, t)
    diagnostics = dict(diagnostics)
    diagnostics.update({"m": m, "t": t, "z_min": float(z[:used].min()),
                        "z_max": float(z[:used].max()),
                        "z_var": float(np.var(z[:used]))})
    return EstimateResult(median_of_means(means), means, used, n_unlabeled,
                          int(mask[:used].sum()), name, diagnostics)


# ---------------------------------------------------------------------------
# Gaussian plug-in


def estimate_gaussian_plugin(train_unlabeled, test_unlabeled, x, fx, config: EstimatorConfig,
                             isotropic=False, models=None) -> EstimateResult:
    """Fit both Gaussians, weight the labeled batches by the plug-in ratio, take the median.

    No truncation is applied unless ``config.truncate`` is set. ``models``
    may inject a pre-fitted ``(p_tr_hat, p_te_hat)`` pair.
    """
    if models is None:
        tr, te = as_points(train_unlabeled), as_points(test_unlabeled)
        if tr.shape[0] != te.shape[0]:
            raise ConfigError("train and test unlabeled sets must have equal size")
        if tr.shape[1] != te.shape[1]:
            raise ValueError("train and test dimensions differ")
        p_tr, p_te = fit_gaussian(tr, isotropic), fit_gaussian(te, isotropic)
        n_unl = tr.shape[0] + te.shape[0]
    else:
        p_tr, p_te = models
        n_unl = 0
    x = as_points(x)
    if x.shape[1] != p_tr.dim:
        raise ValueError("labeled points do not match the fitted dimension")
    ratio: DensityRatioModel = GaussianRatio(p_te, p_tr)
    if config.truncate:
        ratio = TruncatedRatio(ratio, config.ratio_bound)
    diag = {"p_tr_hat": p_tr.to_dict(), "p_te_hat": p_te.to_dict(),
            "jitter": max(p_tr.jitter, p_te.jitter),
            "dropped": p_tr.info.get("dropped", 0) + p_te.info.get("dropped", 0),
            "truncate": config.truncate}
    name = "gauss-iso" if isotropic else "gauss"
    return _run_batches(x, fx, ratio, config.m, config.t, name, diag, n_unl)


# ---------------------------------------------------------------------------
# Truncated ratio


def estimate_truncated_ratio(x, fx, ratio: DensityRatioModel, config: EstimatorConfig,
                             boost=None, name="truncated", diagnostics=None) -> EstimateResult:
    """Zero the weight wherever ``r(x) > B`` and average ``r(x) f(x)``.

    With ``boost`` (default ``config.boost``) the sample is cut into
    ``config.t`` contiguous batches and the median of their means returned.
    Every term satisfies ``|Z_i| <= B``; this is asserted.
    """
    x = as_points(x)
    fx = _check_bounded(fx)
    if fx.size < 1:
        raise ValueError("empty labeled sample")
    boost = config.boost if boost is None else boost
    trunc = ratio if isinstance(ratio, TruncatedRatio) else TruncatedRatio(ratio, config.ratio_bound)
    if boost:
        t = config.t
        m = fx.size // t
        if m < 1:
            raise ConfigError(f"labeled budget {fx.size} is below the batch count {t}")
    else:
        t, m = 1, fx.size
    res = _run_batches(x, fx, trunc, m, t, name, diagnostics or {})
    bound = trunc.bound
    if not (res.diagnostics["z_max"] <= bound and res.diagnostics["z_min"] >= -bound):
        raise AssertionError("truncated term outside [-B, B]")
    res.diagnostics["ratio_bound"] = bound
    return res


def _balanced(tr, te, seed):
    """Subsample the larger side so both classes have equal counts."""
    n = min(tr.shape[0], te.shape[0])
    if n < 1:
        raise ConfigError("both unlabeled sets must be nonempty")
    rng = np.random.default_rng(seed)
    if tr.shape[0] > n:
        tr = tr[np.sort(rng.choice(tr.shape[0], n, replace=False))]
    if te.shape[0] > n:
        te = te[np.sort(rng.choice(te.shape[0], n, replace=False))]
    return tr, te


def classification_set(train_unlabeled, test_unlabeled, seed=None):
    """Stack training draws (label -1) and test draws (label +1), balanced."""
    tr, te = _balanced(as_points(train_unlabeled), as_points(test_unlabeled), seed)
    pts = np.concatenate([tr, te], axis=0)
    y = np.concatenate([-np.ones(tr.shape[0]), np.ones(te.shape[0])])
    return pts, y


def estimate_via_logistic(train_unlabeled, test_unlabeled, x, fx, config: EstimatorConfig,
                          feature_map=identity_features, seed=None) -> EstimateResult:
    """Logistic density-ratio pipeline followed by the truncated estimator."""
    pts, y = classification_set(train_unlabeled, test_unlabeled, seed)
    model = train_logistic(feature_map(pts), y, norm_bound=config.norm_bound, tol=config.tol,
                           max_iters=config.max_iters)
    diag = {"theta": model.theta.tolist(), "intercept": model.intercept,
            "converged": model.diagnostics["converged"], "n_iter": model.diagnostics["n_iter"],
            "subsample_seed": seed, "n_per_class": int(pts.shape[0] // 2)}
    res = estimate_truncated_ratio(x, fx, LogisticRatio(model, feature_map), config,
                                   name="logistic", diagnostics=diag)
    res.n_unlabeled_used = int(pts.shape[0])
    res.diagnostics["model"] = model
    return res


SUPPORT_CAP = 20_000


def estimate_via_kernel_logistic(train_unlabeled, test_unlabeled, x, fx, kernel: KernelSpec,
                                 rkhs_norm_bound: float, config: EstimatorConfig, seed=None,
                                 fit_intercept=True, support_cap=SUPPORT_CAP) -> EstimateResult:
    """Kernel logistic density-ratio pipeline followed by the truncated estimator.

    The intercept is on by default here because the log-ratio of two
    normalized densities carries a constant offset that need not lie in the
    RKHS. Training uses at most ``support_cap`` points in total, drawn as a
    balanced subsample with ``seed``.
    """
    tr, te = as_points(train_unlabeled), as_points(test_unlabeled)
    per_class = min(tr.shape[0], te.shape[0], support_cap // 2)
    rng = np.random.default_rng(seed)
    if tr.shape[0] > per_class:
        tr = tr[np.sort(rng.choice(tr.shape[0], per_class, replace=False))]
    if te.shape[0] > per_class:
        te = te[np.sort(rng.choice(te.shape[0], per_class, replace=False))]
    pts, y = classification_set(tr, te)
    model = train_kernel_logistic(pts, y, kernel, rkhs_norm_bound=rkhs_norm_bound,
                                  tol=config.tol, max_iters=config.max_iters,
                                  fit_intercept=fit_intercept)
    diag = {"rank": model.diagnostics["rank"], "intercept": model.intercept,
            "converged": model.diagnostics["converged"], "n_iter": model.diagnostics["n_iter"],
            "subsample_seed": seed, "n_per_class": per_class}
    res = estimate_truncated_ratio(x, fx, KernelLogisticRatio(model), config,
                                   name="kernel-logistic", diagnostics=diag)
    res.n_unlabeled_used = int(pts.shape[0])
    res.diagnostics["model"] = model
    return res


# ---------------------------------------------------------------------------
# Kernel mean matching


@dataclass
class KmmResult:
    weights: np.ndarray
    objective: float
    converged: bool
    n_iter: int
    pg_norm: float
    rank: int


def kmm_weights(train_points, test_points, config: KmmConfig) -> KmmResult:
    """Weights ``beta`` matching the reweighted training kernel mean to the test one.

    Minimizes ``|| (1/n_tr) sum beta_i phi(x_i) - (1/n_te) sum phi(x~_j) ||^2``
    over ``weight_lower <= beta_i <= B`` and ``|sum(beta)/n_tr - 1| <= eps``.
    Both point sets share one pivoted Cholesky factor, so the reported
    objective is the full squared discrepancy including the test-test term.
    """
    tr, te = as_points(train_points), as_points(test_points)
    if tr.shape[0] == 0 or te.shape[0] == 0:
        raise ValueError("KMM needs nonempty point sets")
    n_tr, n_te = tr.shape[0], te.shape[0]
    fac = pivoted_cholesky(config.kernel, np.concatenate([tr, te], axis=0))
    l_tr, l_te = fac.factor[:n_tr], fac.factor[n_tr:]
    target = l_te.sum(axis=0) / n_te
    eps = config.mean_match_tol if config.mean_match_tol is not None else 1.0 / math.sqrt(n_tr)
    lo, hi = config.weight_lower, config.weight_bound
    sum_lo = max(n_tr * (1.0 - eps), n_tr * lo)
    sum_hi = min(n_tr * (1.0 + eps), n_tr * hi)
    if sum_lo > sum_hi + 1e-9 * n_tr:
        raise ConfigError("KMM box and mean-matching constraints are infeasible")

    def fun_grad(beta):
        a = l_tr.T @ beta / n_tr - target
        return float(a @ a), (2.0 / n_tr) * (l_tr @ a)

    def project(beta):
        return project_box_slab(beta, lo, hi, sum_lo, sum_hi)

    res = projected_gradient(fun_grad, np.ones(n_tr), project, tol=config.tol,
                             max_iters=config.max_iters)
    beta = res.x
    return KmmResult(beta, max(res.fun, 0.0), res.converged, res.n_iter, res.pg_norm, fac.rank)


def estimate_kmm(train_x, train_fx, test_unlabeled, config: KmmConfig) -> EstimateResult:
    """``(1/n_tr) sum beta_i f(x_i)`` with KMM weights."""
    fx = _check_bounded(train_fx)
    km = kmm_weights(train_x, test_unlabeled, config)
    z = km.weights * fx
    value = float(np.mean(z))
    diag = {"objective": km.objective, "converged": km.converged, "n_iter": km.n_iter,
            "pg_norm": km.pg_norm, "rank": km.rank,
            "weight_sum_ratio": float(km.weights.sum() / fx.size),
            "weights_min": float(km.weights.min()), "weights_max": float(km.weights.max())}
    return EstimateResult(value, (value,), int(fx.size), int(as_points(test_unlabeled).shape[0]),
                          0, "kmm", diag)


# ---------------------------------------------------------------------------
# Naive L1 plug-in


def naive_plugin_regress(x, fx, kernel: KernelSpec, f_norm_bound: float, tol=1e-3,
                         max_iters=5_000, step_scale=1.0) -> KernelLogisticModel:
    """L1 kernel regression over ``{||g||_H <= M}`` by projected subgradient descent.

    Works in factor coordinates ``w`` (``K = L L^T``, predictions ``L w``,
    RKHS norm ``||w||``) with normalized steps ``step_scale * M / sqrt(k)``
    and best-iterate tracking. Stops early once the objective
    ``sum |L w - y|`` drops to ``tol * n``. The returned expansion carries
    the objective, the best iteration and the convergence flag.
    """
    x = as_points(x)
    y = np.asarray(fx, dtype=float).ravel()
    n = y.size
    if n < 1:
        raise ValueError("naive plug-in needs at least one labeled point")
    if x.shape[0] != n:
        raise ValueError("points and values differ in length")
    if f_norm_bound < 0:
        raise ConfigError("f_norm_bound must be >= 0")
    fac = pivoted_cholesky(kernel, x)
    lmat = fac.factor
    w = np.zeros(fac.rank)
    best_w, best_obj = w.copy(), float(np.abs(y).sum())
    best_k = 0
    k = 0
    if fac.rank and f_norm_bound > 0 and best_obj > tol * n:
        for k in range(1, max_iters + 1):
            resid = lmat @ w - y
            obj = float(np.abs(resid).sum())
            if obj < best_obj:
                best_obj, best_w, best_k = obj, w.copy(), k
                if obj <= tol * n:
                    break
            g = lmat.T @ np.sign(resid)
            gn = np.linalg.norm(g)
            if gn == 0:
                break
            w = project_ball(w - step_scale * f_norm_bound / math.sqrt(k) * g / gn, f_norm_bound)
    gammas = fac.coefficients(best_w)
    support = x[fac.pivots].copy()
    diag = {"objective": best_obj, "best_iter": best_k, "n_iter": k,
            "converged": bool(best_obj <= tol * n), "rank": fac.rank,
            "w_norm": float(np.linalg.norm(best_w))}
    return KernelLogisticModel(support, gammas, kernel, 0.0, float(f_norm_bound), diag)


def estimate_naive_plugin(x, fx, test_unlabeled, config: KmmConfig) -> EstimateResult:
    """Fit ``f`` by L1 kernel regression on the training sample, then average over the test sample."""
    te = as_points(test_unlabeled)
    if te.shape[0] == 0:
        raise ValueError("naive plug-in needs a nonempty test sample")
    fx = _check_bounded(fx)
    reg = naive_plugin_regress(x, fx, config.kernel, config.f_norm_bound, tol=config.tol,
                               max_iters=config.max_iters, step_scale=config.step_scale)
    value = float(np.mean(reg.score(te)))
    diag = dict(reg.diagnostics)
    diag["train_mean_abs_error"] = diag["objective"] / fx.size
    res = EstimateResult(value, (value,), int(fx.size), int(te.shape[0]), 0, "naive-plugin", diag)
    res.diagnostics["model"] = reg
    return res


def identity_ratio() -> ConstantRatio:
    return ConstantRatio(1.0)


__all__ = [
    "CSV_FIELDS", "EstimatorConfig", "EstimateResult", "KmmConfig", "KmmResult",
    "weighted_batch_mean", "median_of_means", "estimate_gaussian_plugin",
    "estimate_truncated_ratio", "estimate_via_logistic", "estimate_via_kernel_logistic",
    "kmm_weights", "estimate_kmm", "naive_plugin_regress", "estimate_naive_plugin",
    "classification_set", "identity_ratio",
]
