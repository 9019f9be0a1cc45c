"""Probability models, samplers and divergence calculators.

Every model exposes ``log_density(x)`` (vectorized over rows of an (n, d)
array) and ``sample(n, seed)``. Models are immutable once built; samplers
draw from ``numpy.random.default_rng(seed)`` and keep no state between calls.

Total variation follows the usual 1/2-normalized convention,
``d_TV(p, q) = 1/2 * int |p - q|``. Where a bound needs the unnormalized L1
distance (the bias bound for plug-in ratios) callers double it explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate, linalg

from covshift.errors import ConfigError, FactorizationError, SamplingError
from covshift.kernels import KernelSpec, as_points

LOG_2PI = math.log(2.0 * math.pi)

# jitter ladder relative to trace(cov) / d
COV_JITTER = (1e-10, 1e-8, 1e-6)

# rejection sampler gives up below this acceptance rate over this many proposals
MIN_ACCEPTANCE = 1e-4
ACCEPTANCE_WINDOW = 100_000


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class MCEstimate(NamedTuple):
    """A Monte-Carlo estimate with its standard error."""

    value: float
    stderr: float
    n: int
    flags: tuple = ()


# ---------------------------------------------------------------------------
# Gaussian


@dataclass(frozen=True, eq=False)
class GaussianModel:
    """Multivariate normal ``N(mean, cov)``.

    ``cov`` is symmetrized on construction. With ``isotropic=True`` the
    covariance is the identity and is never estimated.
    """

    mean: np.ndarray
    cov: np.ndarray = None
    isotropic: bool = False
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1 or mean.size < 1:
            raise ConfigError("mean must be a non-empty vector")
        d = mean.size
        if self.isotropic or self.cov is None:
            cov = np.eye(d)
            object.__setattr__(self, "isotropic", bool(self.isotropic or self.cov is None))
        else:
            cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
            if cov.shape != (d, d):
                raise ConfigError(f"cov must be {d}x{d}, got {cov.shape}")
            cov = 0.5 * (cov + cov.T)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ConfigError("mean and cov must be finite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def _chol(self):
        """Lower Cholesky factor and the relative jitter that was needed."""
        if self.isotropic:
            return np.eye(self.dim), 0.0
        try:
            return linalg.cholesky(self.cov, lower=True), 0.0
        except linalg.LinAlgError:
            pass
        scale = max(np.trace(self.cov) / self.dim, np.finfo(float).tiny)
        for jit in COV_JITTER:
            try:
                chol = linalg.cholesky(self.cov + jit * scale * np.eye(self.dim), lower=True)
                return chol, jit
            except linalg.LinAlgError:
                continue
        raise FactorizationError(
            f"covariance not factorizable even with jitter {COV_JITTER[-1]} * trace/d"
        )

    @property
    def jitter(self) -> float:
        """Relative jitter that was added to factorize ``cov`` (0 if none)."""
        return self._chol[1]

    @cached_property
    def logdet(self) -> float:
        chol = self._chol[0]
        return 2.0 * float(np.sum(np.log(np.diag(chol))))

    def mahalanobis_sq(self, x) -> np.ndarray:
        x = self._check(x)
        diff = x - self.mean
        if self.isotropic:
            return np.sum(diff * diff, axis=1)
        z = linalg.solve_triangular(self._chol[0], diff.T, lower=True)
        return np.sum(z * z, axis=0)

    def log_density(self, x) -> np.ndarray:
        return -0.5 * self.mahalanobis_sq(x) - 0.5 * (self.dim * LOG_2PI + self.logdet)

    def precision(self) -> np.ndarray:
        chol = self._chol[0]
        inv = linalg.cho_solve((chol, True), np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def sample(self, n, seed=None) -> np.ndarray:
        n = int(n)
        if n < 0:
            raise ValueError("n must be >= 0")
        z = _rng(seed).standard_normal((n, self.dim))
        if self.isotropic:
            return z + self.mean
        return z @ self._chol[0].T + self.mean

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or (x.ndim == 1 and self.dim == 1):
            x = x.reshape(-1, 1)
        elif x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: model d={self.dim}, x has {x.shape[1]}")
        return x

    def to_dict(self) -> dict:
        out = {"kind": "gaussian", "mean": self.mean.tolist()}
        if self.isotropic:
            out["isotropic"] = True
        else:
            out["cov"] = self.cov.tolist()
        return out


def fit_gaussian(samples, isotropic=False) -> GaussianModel:
    """Fit ``N(mu, Sigma)`` from 2m samples with the split estimator.

    The mean averages the first m samples; the covariance averages outer
    products of the m consecutive paired differences ``x_{2i} - x_{2i-1}``
    and divides by 2m. An odd final sample is dropped and reported in
    ``model.info["dropped"]``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("fit_gaussian needs a non-empty (n, d) sample array")
    if x.shape[0] < 2:
        raise ValueError("fit_gaussian needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite coordinates")
    dropped = x.shape[0] % 2
    if dropped:
        x = x[:-1]
    m = x.shape[0] // 2
    mu = x[:m].mean(axis=0)
    info = {"n_used": 2 * m, "dropped": dropped}
    if isotropic:
        return GaussianModel(mu, None, isotropic=True, info=info)
    diffs = x[1::2] - x[0::2]
    sigma = diffs.T @ diffs / (2.0 * m)
    return GaussianModel(mu, sigma, info=info)


def log_density(model, x) -> np.ndarray:
    return model.log_density(x)


def log_density_ratio_gaussian(num: GaussianModel, den: GaussianModel, x) -> np.ndarray:
    """``ln num(x) - ln den(x)`` as one quadratic-form difference."""
    if num.dim != den.dim:
        raise ValueError(f"dimension mismatch: {num.dim} vs {den.dim}")
    return 0.5 * (den.mahalanobis_sq(x) - num.mahalanobis_sq(x)) + 0.5 * (den.logdet - num.logdet)


def sample(model, n, seed=None) -> np.ndarray:
    return model.sample(n, seed)


# ---------------------------------------------------------------------------
# Other base laws


@dataclass(frozen=True, eq=False)
class UniformBox:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or np.any(high <= low):
            raise ConfigError("UniformBox needs high > low elementwise")
        object.__setattr__(self, "low", _frozen(low))
        object.__setattr__(self, "high", _frozen(high))

    @property
    def dim(self) -> int:
        return self.low.size

    def log_density(self, x) -> np.ndarray:
        x = as_points(x)
        inside = np.all((x >= self.low) & (x <= self.high), axis=1)
        logvol = float(np.sum(np.log(self.high - self.low)))
        return np.where(inside, -logvol, -np.inf)

    def sample(self, n, seed=None) -> np.ndarray:
        return _rng(seed).uniform(self.low, self.high, size=(int(n), self.dim))

    def to_dict(self) -> dict:
        return {"kind": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    """Finite distribution over atoms (rows of ``atoms``)."""

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = as_points(self.atoms)
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (atoms.shape[0],) or np.any(probs < 0):
            raise ConfigError("probs must be a nonnegative vector, one per atom")
        if not math.isclose(probs.sum(), 1.0, abs_tol=1e-12):
            raise ConfigError(f"probs must sum to 1, got {probs.sum()!r}")
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def atom_index(self, x) -> np.ndarray:
        """Index of the atom equal to each row of ``x``; -1 if none."""
        x = as_points(x)
        eq = np.all(x[:, None, :] == self.atoms[None, :, :], axis=2)
        idx = np.where(eq.any(axis=1), eq.argmax(axis=1), -1)
        return idx

    def log_density(self, x) -> np.ndarray:
        idx = self.atom_index(x)
        with np.errstate(divide="ignore"):
            logp = np.log(self.probs)
        return np.where(idx >= 0, logp[np.maximum(idx, 0)], -np.inf)

    def sample(self, n, seed=None) -> np.ndarray:
        idx = _rng(seed).choice(self.atoms.shape[0], size=int(n), p=self.probs)
        return self.atoms[idx].copy()

    def to_dict(self) -> dict:
        return {"kind": "discrete", "atoms": self.atoms.tolist(), "probs": self.probs.tolist()}


# ---------------------------------------------------------------------------
# RKHS-reweighted law


@dataclass(frozen=True, eq=False)
class RkhsReweightedModel:
    """``p(x) ∝ base(x) * exp(-log_ratio(x))`` with an RKHS log-ratio.

    ``log_ratio(x) = sum_i alphas[i] * K(centers[i], x)`` plays the role of
    ``ln(base / p)``, so the base is the training law and this model is the
    test law. Sampling is by rejection from the base with acceptance
    probability ``exp(-log_ratio(x) - bound)`` clipped to [0, 1], where
    ``bound`` should dominate ``sup |log_ratio|`` on the support.
    """

    base: object
    kernel: KernelSpec
    centers: np.ndarray
    alphas: np.ndarray
    log_ratio_bound: float

    def __post_init__(self):
        centers = as_points(self.centers)
        alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        if alphas.shape != (centers.shape[0],):
            raise ConfigError("need one alpha per center")
        if centers.shape[1] != self.base.dim:
            raise ConfigError("centers and base dimension differ")
        if not self.log_ratio_bound >= 0:
            raise ConfigError("log_ratio_bound must be >= 0")
        object.__setattr__(self, "centers", _frozen(centers))
        object.__setattr__(self, "alphas", _frozen(alphas))

    @property
    def dim(self) -> int:
        return self.base.dim

    def log_ratio(self, x) -> np.ndarray:
        """``ln(base(x) / p(x))`` up to the additive normalizer."""
        return self.kernel(as_points(x), self.centers) @ self.alphas

    @cached_property
    def log_normalizer(self) -> float:
        """``ln E_base exp(-log_ratio)``; quadrature in 1-d, Monte Carlo otherwise."""
        if not np.any(self.alphas):
            return 0.0
        if self.dim == 1:
            if isinstance(self.base, GaussianModel):
                mu, sd = float(self.base.mean[0]), math.sqrt(float(self.base.cov[0, 0]))
                lo, hi = mu - 12 * sd, mu + 12 * sd
            else:
                lo, hi = float(self.base.low[0]), float(self.base.high[0])

            def integrand(t):
                pt = np.array([[t]])
                return math.exp(float(self.base.log_density(pt)[0] - self.log_ratio(pt)[0]))

            val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-13, epsrel=1e-12)
            return math.log(val)
        xs = self.base.sample(2_000_000, seed=20240601)
        return float(np.log(np.mean(np.exp(-self.log_ratio(xs)))))

    def log_density(self, x) -> np.ndarray:
        x = as_points(x)
        return self.base.log_density(x) - self.log_ratio(x) - self.log_normalizer

    def sample_with_stats(self, n, seed=None):
        """Draw ``n`` samples; also return the empirical acceptance rate."""
        n = int(n)
        if n < 0:
            raise ValueError("n must be >= 0")
        rng = _rng(seed)
        out = []
        have = 0
        proposed = 0
        accepted = 0
        while have < n:
            rate = accepted / proposed if proposed else 1.0
            chunk = int(min(max(1024, 1.2 * (n - have) / max(rate, 1e-4)), 1_000_000))
            xs = self.base.sample(chunk, rng)
            logacc = np.minimum(-self.log_ratio(xs) - self.log_ratio_bound, 0.0)
            keep = rng.random(chunk) < np.exp(logacc)
            proposed += chunk
            accepted += int(keep.sum())
            out.append(xs[keep])
            have += int(keep.sum())
            if proposed >= ACCEPTANCE_WINDOW and accepted / proposed < MIN_ACCEPTANCE:
                raise SamplingError(
                    f"rejection acceptance {accepted / proposed:.2e} < {MIN_ACCEPTANCE} over "
                    f"{proposed} proposals; log_ratio_bound is probably too large"
                )
        xs = np.concatenate(out, axis=0)[:n] if out else np.zeros((0, self.dim))
        return xs, (accepted / proposed if proposed else float("nan"))

    def sample(self, n, seed=None) -> np.ndarray:
        return self.sample_with_stats(n, seed)[0]

    def to_dict(self) -> dict:
        return {
            "kind": "rkhs_reweighted",
            "base": self.base.to_dict(),
            "kernel": self.kernel.to_dict(),
            "centers": self.centers.tolist(),
            "alphas": self.alphas.tolist(),
            "log_ratio_bound": self.log_ratio_bound,
        }


# ---------------------------------------------------------------------------
# Exponential families


@dataclass(frozen=True, eq=False)
class ExponentialFamilySpec:
    """``p(x | theta) = h(x) exp(<theta, T(x)> - A(theta))``."""

    dim_D: int
    sufficient_stat: Callable
    log_base: Callable
    log_partition: Callable
    sampler: Callable
    natural_param: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def log_density(self, x, theta=None) -> np.ndarray:
        theta = self.natural_param if theta is None else np.asarray(theta, dtype=float)
        t = self.sufficient_stat(x)
        return self.log_base(x) + t @ theta - self.log_partition(theta)

    def with_param(self, theta) -> "ExponentialFamilySpec":
        return ExponentialFamilySpec(
            self.dim_D, self.sufficient_stat, self.log_base, self.log_partition,
            self.sampler, _frozen(theta), self.name, self.params,
        )

    def sample(self, n, seed=None) -> np.ndarray:
        return self.sampler(self.natural_param, int(n), seed)


def gaussian_mean_family(cov, theta=None) -> ExponentialFamilySpec:
    """Gaussians with known shared covariance, ``T(x) = x``, ``theta = cov^{-1} mu``.

    ``A(theta) = theta^T cov theta / 2`` and
    ``ln h(x) = -x^T cov^{-1} x / 2 - ln det(2 pi cov) / 2``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    ref = GaussianModel(np.zeros(d), cov)
    prec = ref.precision()

    def stat(x):
        return ref._check(x)

    def log_base(x):
        return ref.log_density(x)

    def log_partition(theta):
        theta = np.asarray(theta, dtype=float)
        return 0.5 * float(theta @ ref.cov @ theta)

    def sampler(theta, n, seed):
        return GaussianModel(ref.cov @ np.asarray(theta, dtype=float), ref.cov).sample(n, seed)

    theta = np.zeros(d) if theta is None else theta
    return ExponentialFamilySpec(
        d, stat, log_base, log_partition, sampler, _frozen(theta),
        name="gaussian_mean", params={"cov": ref.cov, "precision": prec},
    )


# ---------------------------------------------------------------------------
# Divergences


def kl_gaussian(p: GaussianModel, q: GaussianModel) -> float:
    """Closed-form ``KL(p || q)`` between Gaussians."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    try:
        qchol = linalg.cholesky(q.cov, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError("KL needs an invertible q.cov") from exc
    d = p.dim
    diff = q.mean - p.mean
    a = linalg.solve_triangular(qchol, p.cov, lower=True)
    tr = float(np.trace(linalg.solve_triangular(qchol.T, a, lower=False)))
    z = linalg.solve_triangular(qchol, diff, lower=True)
    maha = float(z @ z)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(qchol))))
    sign, logdet_p = np.linalg.slogdet(p.cov)
    if sign <= 0:
        raise FactorizationError("KL needs a positive definite p.cov")
    return 0.5 * (tr + maha - d + logdet_q - logdet_p)


def tv_upper_pinsker(p: GaussianModel, q: GaussianModel) -> float:
    """Pinsker upper bound ``sqrt(2 * min(KL(p||q), KL(q||p)))`` clamped to [0, 1]."""
    kl = min(kl_gaussian(p, q), kl_gaussian(q, p))
    return float(min(1.0, math.sqrt(2.0 * max(kl, 0.0))))


def _log_ratio_samples(p_num, p_den, xs):
    lnum = np.asarray(p_num.log_density(xs), dtype=float)
    lden = np.asarray(p_den.log_density(xs), dtype=float)
    if np.any(np.isneginf(lden)):
        raise ValueError("denominator density is zero at a sampled point")
    return lnum - lden


def q_divergence_mc(s, p_hat, p, q, n, seed=None) -> MCEstimate:
    """``Q_s(p_hat | p, q) = (E_{x~q} |p(x)/p_hat(x) - 1|^s)^(1/s)`` by Monte Carlo."""
    if s < 1:
        raise ValueError("order s must be >= 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = q.sample(n, seed)
    terms = np.abs(np.expm1(_log_ratio_samples(p, p_hat, xs))) ** s
    m = float(terms.mean())
    se_m = float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    value = m ** (1.0 / s)
    # delta method for the 1/s power
    se = se_m if s == 1 else (se_m * value / (s * m) if m > 0 else 0.0)
    return MCEstimate(value, se, n)


def tv_distance_mc(p, q, n, seed=None) -> MCEstimate:
    """``d_TV(p, q) = 1/2 E_{x~q} |p(x)/q(x) - 1|`` by Monte Carlo."""
    est = q_divergence_mc(1, q, p, q, n, seed)
    return MCEstimate(0.5 * est.value, 0.5 * est.stderr, n)


def renyi_r2_mc(p1, p2, n, seed=None, high_variance_threshold=1e4) -> MCEstimate:
    """``R_2(p1 || p2) = E_{x~p2} (p1(x)/p2(x))^2`` by Monte Carlo.

    Flags ``"high_variance"`` when the empirical second moment of the summands
    exceeds ``high_variance_threshold`` (the estimate is then unreliable).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = p2.sample(n, seed)
    w = np.exp(2.0 * _log_ratio_samples(p1, p2, xs))
    value = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    flags = ()
    with np.errstate(over="ignore"):
        second = float(np.mean(w * w))
    if not np.isfinite(second) or second > high_variance_threshold:
        flags = ("high_variance",)
    return MCEstimate(value, se, n, flags)


def model_from_dict(d: dict):
    """Rebuild a serializable model from :meth:`to_dict` output."""
    d = dict(d)
    kind = d.pop("kind", None)
    expected = {
        "gaussian": {"mean", "cov", "isotropic"},
        "uniform": {"low", "high"},
        "discrete": {"atoms", "probs"},
        "rkhs_reweighted": {"base", "kernel", "centers", "alphas", "log_ratio_bound"},
    }
    if kind not in expected:
        raise ConfigError(f"unknown distribution kind {kind!r}")
    unknown = set(d) - expected[kind]
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {kind} distribution")
    if kind == "gaussian":
        return GaussianModel(d["mean"], d.get("cov"), isotropic=bool(d.get("isotropic", False)))
    if kind == "uniform":
        return UniformBox(d["low"], d["high"])
    if kind == "discrete":
        return DiscreteModel(d["atoms"], d["probs"])
    return RkhsReweightedModel(
        model_from_dict(d["base"]),
        KernelSpec.from_dict(d["kernel"]),
        d["centers"],
        d["alphas"],
        float(d["log_ratio_bound"]),
    )
