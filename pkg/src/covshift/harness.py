"""Synthetic scenarios, ground-truth oracles, seeded experiment grids and summaries.

Per-trial randomness comes from ``SeedSequence([root_seed, n, trial_index])``,
so results depend only on the plan, never on scheduling or thread count.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, special

from covshift.density_ratio import ExactRatio
from covshift.distributions import (
    DiscreteModel,
    GaussianModel,
    RkhsReweightedModel,
    kl_gaussian,
    model_from_dict,
    renyi_r2_mc,
    tv_upper_pinsker,
)
from covshift.errors import AssumptionError, ConfigError, CovshiftError
from covshift.estimators import (
    EstimatorConfig,
    KmmConfig,
    estimate_gaussian_plugin,
    estimate_kmm,
    estimate_naive_plugin,
    estimate_truncated_ratio,
    estimate_via_kernel_logistic,
    estimate_via_logistic,
)
from covshift.kernels import KernelSpec, as_points
from covshift.targets import (
    AtomIndicator,
    BallIndicator,
    Constant,
    HalfspaceIndicator,
    PlantedRkhs,
    TanhCoordinate,
    target_from_dict,
)

FORMAT_VERSION = 1
PROBE_SAMPLES = 100_000
MC_CHUNK = 1_000_000


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class AssumptionBounds:
    """Numeric stand-ins for the O(1) closeness constants of the Gaussian analysis."""

    mean_norm: float = 1.0
    shift_norm: float = 1.0
    prec_op: float = 1.0
    prec_gap: float = 1.0


@dataclass(eq=False)
class ScenarioSpec:
    """A synthetic covariate-shift problem.

    ``truth`` is set when a closed form exists (``oracle["method"] ==
    "closed_form"``); otherwise :func:`ground_truth` follows ``oracle``.
    """

    id: str
    p_tr: object
    p_te: object
    f: object
    truth: float | None = None
    oracle: dict = field(default_factory=lambda: {"method": "closed_form"})
    tail_bound_hint: tuple | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.p_tr.dim

    def sample_labeled(self, n, seed=None):
        x = self.p_tr.sample(n, seed)
        return x, self.f(x)

    def probe(self, n=PROBE_SAMPLES, seed=0) -> float:
        """Largest ``|f|`` on probe draws from both laws; raises if it exceeds 1."""
        ss = np.random.SeedSequence([seed, 7])
        a, b = ss.spawn(2)
        vals = np.concatenate([self.f(self.p_tr.sample(n, np.random.default_rng(a))),
                               self.f(self.p_te.sample(n, np.random.default_rng(b)))])
        top = float(np.max(np.abs(vals))) if vals.size else 0.0
        if not top <= 1.0:
            raise ConfigError(f"scenario {self.id!r}: |f| reaches {top:.4g} > 1 on probe samples")
        return top

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "id": self.id,
            "p_tr": self.p_tr.to_dict(),
            "p_te": self.p_te.to_dict(),
            "f": self.f.to_dict(),
            "truth": self.truth,
            "oracle": dict(self.oracle),
            "tail_bound_hint": list(self.tail_bound_hint) if self.tail_bound_hint else None,
            "metadata": _jsonable(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        check_version(d, "scenario")
        allowed = {"format_version", "id", "p_tr", "p_te", "f", "truth", "oracle",
                   "tail_bound_hint", "metadata"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in scenario")
        for key in ("id", "p_tr", "p_te", "f"):
            if key not in d:
                raise ConfigError(f"scenario is missing required key {key!r}")
        hint = d.get("tail_bound_hint")
        return cls(
            id=str(d["id"]),
            p_tr=model_from_dict(d["p_tr"]),
            p_te=model_from_dict(d["p_te"]),
            f=target_from_dict(d["f"]),
            truth=d.get("truth"),
            oracle=dict(d.get("oracle") or {"method": "closed_form"}),
            tail_bound_hint=tuple(hint) if hint else None,
            metadata=dict(d.get("metadata") or {}),
        )


def check_version(d: dict, what: str):
    v = d.get("format_version")
    if v != FORMAT_VERSION:
        raise ConfigError(f"{what} has format_version {v!r}; expected {FORMAT_VERSION}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _as_target(f, d):
    if f is None:
        return HalfspaceIndicator(np.eye(d)[0], 0.0)
    if isinstance(f, dict):
        return target_from_dict(f)
    return f


def make_covariance_pair(d, prec_gap=0.5, seed=0, spread=(0.6, 1.0)):
    """Covariances whose precisions differ by a PSD matrix of Frobenius norm ``prec_gap``.

    The training precision has eigenvalues in ``spread`` (so its operator
    norm is at most 1) and the test precision adds the PSD gap, making the
    test law the narrower one and keeping ``E_tr r^2`` finite.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.linspace(spread[0], spread[1], d)
    prec_tr = (q * eig) @ q.T
    u, _ = np.linalg.qr(rng.standard_normal((d, d)))
    w = rng.uniform(0.5, 1.0, d)
    gap = (u * w) @ u.T
    gap *= prec_gap / np.linalg.norm(gap, "fro")
    prec_te = prec_tr + gap
    return np.linalg.inv(prec_tr), np.linalg.inv(prec_te)


def gaussian_assumptions(p_tr: GaussianModel, p_te: GaussianModel,
                         bounds: AssumptionBounds = AssumptionBounds()) -> dict:
    """Measured closeness quantities with their bounds and pass flags."""
    prec_tr, prec_te = p_tr.precision(), p_te.precision()
    vals = {
        "mean_tr_norm": (float(np.linalg.norm(p_tr.mean)), bounds.mean_norm),
        "mean_shift_norm": (float(np.linalg.norm(p_te.mean - p_tr.mean)), bounds.shift_norm),
        "prec_tr_op": (float(np.linalg.norm(prec_tr, 2)), bounds.prec_op),
        "prec_gap_fro": (float(np.linalg.norm(prec_tr - prec_te, "fro")), bounds.prec_gap),
    }
    return {k: {"value": v, "bound": b, "ok": bool(v <= b * (1 + 1e-12))}
            for k, (v, b) in vals.items()}


def make_gaussian_scenario(d, mean_shift, cov_tr=None, cov_te=None, f=None, mean_tr=None,
                           bounds: AssumptionBounds = AssumptionBounds(), warn_only=False,
                           isotropic=False, scenario_id=None, tail_bound_hint=None,
                           oracle_precision=1e-3, oracle_seed=0) -> ScenarioSpec:
    """Gaussian train and test laws with validated closeness assumptions.

    Raises
    ------
    AssumptionError
        When a measured quantity exceeds its bound, unless ``warn_only``.
    """
    d = int(d)
    if d < 1:
        raise ConfigError("d must be >= 1")
    if np.ndim(mean_shift) == 0:
        # a scalar shift moves the first coordinate
        shift = np.zeros(d)
        shift[0] = float(mean_shift)
    else:
        shift = np.asarray(mean_shift, dtype=float)
    if shift.shape != (d,):
        raise ConfigError(f"mean_shift must have length {d}")
    mu_tr = np.zeros(d) if mean_tr is None else np.asarray(mean_tr, dtype=float)
    cov_tr = np.eye(d) if cov_tr is None else np.asarray(cov_tr, dtype=float)
    cov_te = cov_tr if cov_te is None else np.asarray(cov_te, dtype=float)
    p_tr = GaussianModel(mu_tr, cov_tr, isotropic=isotropic)
    p_te = GaussianModel(mu_tr + shift, cov_te, isotropic=isotropic)
    record = gaussian_assumptions(p_tr, p_te, bounds)
    bad = [k for k, v in record.items() if not v["ok"]]
    meta = {"assumptions": record, "kind": "gaussian", "isotropic": bool(isotropic)}
    if bad:
        msg = ", ".join(f"{k}={record[k]['value']:.4g} > {record[k]['bound']}" for k in bad)
        if not warn_only:
            raise AssumptionError(f"assumption violated: {msg}")
        warnings.warn(f"proceeding despite assumption violation: {msg}", stacklevel=2)
        meta["assumption_warning"] = msg
    null = not np.any(shift) and np.array_equal(p_tr.cov, p_te.cov)
    meta["null_shift"] = bool(null)
    target = _as_target(f, d)
    sid = scenario_id or f"gauss-d{d}-shift{np.linalg.norm(shift):g}"
    scen = ScenarioSpec(sid, p_tr, p_te, target, tail_bound_hint=tail_bound_hint, metadata=meta)
    _attach_oracle(scen, oracle_precision, oracle_seed)
    return scen


def make_rkhs_scenario(alphas=(-0.8,), centers=((0.0,),), bandwidth=1.0, f=None, base=None,
                       scenario_id=None, oracle_precision=1e-3, oracle_seed=0) -> ScenarioSpec:
    """Test law ``p_te ∝ p_tr exp(-sum_i alphas[i] K(c_i, x))`` over a Gaussian base.

    A negative alpha makes the test law heavier near its center. The
    rejection bound is ``sum |alphas|``, which dominates the rbf log-ratio.
    """
    base = base or GaussianModel([0.0], [[1.0]])
    kernel = KernelSpec.rbf(bandwidth)
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    bound = float(np.abs(alphas).sum())
    p_te = RkhsReweightedModel(base, kernel, centers, alphas, bound)
    target = f if f is not None else BallIndicator(1.0)
    if isinstance(target, dict):
        target = target_from_dict(target)
    sid = scenario_id or f"rkhs-d{base.dim}-a{'_'.join(f'{a:g}' for a in alphas)}"
    meta = {"kind": "rkhs", "null_shift": not np.any(alphas),
            "log_ratio_bound": bound}
    scen = ScenarioSpec(sid, base, p_te, target, metadata=meta)
    _attach_oracle(scen, oracle_precision, oracle_seed)
    return scen


def make_expfam_scenario(spec, theta_tr, theta_te, f=None, scenario_id=None,
                         r2_samples=200_000, seed=0, oracle_precision=1e-3) -> ScenarioSpec:
    """Scenario from two members of an exponential family.

    Carries the ground-truth classifier parameters ``theta_star = theta_te -
    theta_tr`` and ``s_star = A(theta_tr) - A(theta_te)``, so that
    ``ln(p_te / p_tr) = <theta_star, T(x)> + s_star``.
    """
    theta_tr = np.atleast_1d(np.asarray(theta_tr, dtype=float))
    theta_te = np.atleast_1d(np.asarray(theta_te, dtype=float))
    if theta_tr.shape != (spec.dim_D,) or theta_te.shape != (spec.dim_D,):
        raise ConfigError(f"natural parameters must have length {spec.dim_D}")
    a_tr, a_te = float(spec.log_partition(theta_tr)), float(spec.log_partition(theta_te))
    if not (np.isfinite(a_tr) and np.isfinite(a_te)):
        raise ConfigError("natural parameter outside the family's domain")
    if spec.name == "gaussian_mean":
        cov = np.asarray(spec.params["cov"], dtype=float)
        p_tr, p_te = GaussianModel(cov @ theta_tr, cov), GaussianModel(cov @ theta_te, cov)
    else:
        p_tr, p_te = _FamilyMember(spec, theta_tr), _FamilyMember(spec, theta_te)
    d = p_tr.dim
    meta = {
        "kind": "expfam", "family": spec.name,
        "theta_star": (theta_te - theta_tr).tolist(), "s_star": a_tr - a_te,
        "null_shift": bool(np.array_equal(theta_tr, theta_te)),
    }
    r2 = renyi_r2_mc(p_tr, p_te, r2_samples, seed=seed)
    meta["r2_tr_te"] = {"value": r2.value, "stderr": r2.stderr, "flags": list(r2.flags)}
    sid = scenario_id or f"expfam-{spec.name}-d{d}"
    scen = ScenarioSpec(sid, p_tr, p_te, _as_target(f, d), metadata=meta)
    _attach_oracle(scen, oracle_precision, seed)
    return scen


class _FamilyMember:
    """Adapter exposing one exponential-family member as a density model."""

    def __init__(self, spec, theta):
        self.spec, self.theta = spec, theta
        self.dim = int(as_points(spec.with_param(theta).sample(1, 0)).shape[1])

    def log_density(self, x):
        return self.spec.log_density(x, self.theta)

    def sample(self, n, seed=None):
        return as_points(self.spec.with_param(self.theta).sample(n, seed))

    def to_dict(self):
        raise ConfigError("only Gaussian exponential families serialize")


def make_lower_bound_instance(B, eps):
    """Two discrete scenarios that agree on ``p_tr`` and ``p_te`` but not on ``f``.

    Three atoms ``{0, 1, 2}``; atom 0 is the set ``S`` with ``p_te(S) = 2 eps``
    and ``p_tr(S) = 2 eps / B``, and the remaining mass is split evenly over
    atoms 1 and 2. Scenario A uses ``f = 1_S`` (truth ``2 eps``), scenario B
    uses ``f = 0`` (truth 0).
    """
    B, eps = float(B), float(eps)
    if not B >= 1:
        raise ConfigError("B must be >= 1")
    if not 0 < 2 * eps <= 1:
        raise ConfigError("need 0 < 2*eps <= 1")
    atoms = [[0.0], [1.0], [2.0]]
    s_te, s_tr = 2 * eps, 2 * eps / B
    p_te = DiscreteModel(atoms, [s_te, (1 - s_te) / 2, (1 - s_te) / 2])
    p_tr = DiscreteModel(atoms, [s_tr, (1 - s_tr) / 2, (1 - s_tr) / 2])
    meta = {"kind": "lower_bound", "B": B, "eps": eps, "p_tr_S": s_tr, "p_te_S": s_te,
            "degenerate": bool(B == 1), "null_shift": bool(B == 1 and s_te == s_tr)}
    a = ScenarioSpec(f"lower-bound-A-B{B:g}-eps{eps:g}", p_tr, p_te, AtomIndicator([[0.0]]),
                     truth=s_te, tail_bound_hint=(B, eps), metadata=dict(meta, role="A"))
    b = ScenarioSpec(f"lower-bound-B-B{B:g}-eps{eps:g}", p_tr, p_te, Constant(0.0),
                     truth=0.0, tail_bound_hint=(B, eps), metadata=dict(meta, role="B"))
    return a, b


# ---------------------------------------------------------------------------
# Ground truth


def _gaussian_closed_form(p: GaussianModel, f):
    mu, cov = p.mean, p.cov
    if isinstance(f, HalfspaceIndicator):
        sd = math.sqrt(float(f.w @ cov @ f.w))
        return float(special.ndtr((f.w @ mu + f.b) / sd)) if sd > 0 else float(f.w @ mu + f.b > 0)
    if isinstance(f, PlantedRkhs):
        s2 = f.kernel.bandwidth**2
        d = p.dim
        m = cov + s2 * np.eye(d)
        scale = 1.0 / math.sqrt(np.linalg.det(np.eye(d) + cov / s2))
        diff = mu[None, :] - f.centers
        quad = np.einsum("ij,ij->i", diff, np.linalg.solve(m, diff.T).T)
        return float(scale * (f.alphas @ np.exp(-0.5 * quad)))
    if isinstance(f, BallIndicator) and p.dim == 1:
        sd = math.sqrt(float(cov[0, 0]))
        return float(special.ndtr((f.radius - mu[0]) / sd) - special.ndtr((-f.radius - mu[0]) / sd))
    if isinstance(f, Constant):
        return float(f.value)
    return None


def _exact_truth(p, f):
    if isinstance(f, Constant):
        return float(f.value)
    if isinstance(p, GaussianModel):
        return _gaussian_closed_form(p, f)
    if isinstance(p, DiscreteModel):
        return float(np.sum(p.probs * f(p.atoms)))
    return None


def _attach_oracle(scen: ScenarioSpec, precision, seed):
    val = _exact_truth(scen.p_te, scen.f)
    if val is not None:
        scen.truth = val
        scen.oracle = {"method": "closed_form"}
        return
    budget = mc_budget(precision)
    method = "rejection_mc" if isinstance(scen.p_te, RkhsReweightedModel) else "monte_carlo"
    scen.truth = None
    scen.oracle = {"method": method, "budget": budget, "seed": int(seed),
                   "precision": float(precision)}


def mc_budget(precision) -> int:
    """Oracle sample size ``(3 / precision)^2`` so that the SE is at most ``precision / 3``."""
    if not precision > 0:
        raise ConfigError("precision must be positive")
    return int(math.ceil((3.0 / precision) ** 2))


def _quadrature_truth(p, f):
    """1-d marginal quadrature for tanh/ball targets; returns (value, error) or None."""
    if isinstance(p, GaussianModel) and isinstance(f, TanhCoordinate):
        mu, sd = float(p.mean[f.j]), math.sqrt(float(p.cov[f.j, f.j]))
        val, err = integrate.quad(
            lambda u: math.tanh(mu + sd * u) * math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi),
            -40, 40, limit=400, epsabs=1e-13)
        return val, err
    if isinstance(p, RkhsReweightedModel) and p.dim == 1:
        lo, hi = -40.0, 40.0
        if isinstance(p.base, GaussianModel):
            m, s = float(p.base.mean[0]), math.sqrt(float(p.base.cov[0, 0]))
            lo, hi = m - 14 * s, m + 14 * s

        def integrand(t):
            pt = np.array([[t]])
            return float(f(pt)[0]) * math.exp(float(p.log_density(pt)[0]))

        pts = [-f.radius, f.radius] if isinstance(f, BallIndicator) else None
        val, err = integrate.quad(integrand, lo, hi, points=pts, limit=400, epsabs=1e-12)
        return val, err
    return None


def ground_truth(scenario: ScenarioSpec, precision=None, seed=None, method=None):
    """``E_{p_te} f`` as ``(value, standard_error)``.

    Closed forms return SE 0. ``monte_carlo`` and ``rejection_mc`` draw
    ``(3 / precision)^2`` test samples in chunks; ``quadrature`` integrates a
    one-dimensional marginal and returns the quadrature error estimate.
    """
    oracle = scenario.oracle
    method = method or oracle.get("method", "closed_form")
    if method == "closed_form":
        if scenario.truth is None:
            val = _exact_truth(scenario.p_te, scenario.f)
            if val is None:
                raise ConfigError(f"scenario {scenario.id!r} has no closed-form truth")
            return val, 0.0
        return float(scenario.truth), 0.0
    if method == "quadrature":
        out = _quadrature_truth(scenario.p_te, scenario.f)
        if out is None:
            raise ConfigError("quadrature oracle unavailable for this scenario")
        return float(out[0]), float(out[1])
    if method not in ("monte_carlo", "rejection_mc"):
        raise ConfigError(f"unknown oracle method {method!r}")
    precision = precision if precision is not None else oracle.get("precision", 1e-3)
    budget = mc_budget(precision)
    seed = oracle.get("seed", 0) if seed is None else seed
    ss = np.random.SeedSequence([int(seed), 11])
    n_chunks = -(-budget // MC_CHUNK)
    total = total_sq = 0.0
    for k, child in enumerate(ss.spawn(n_chunks)):
        size = min(MC_CHUNK, budget - k * MC_CHUNK)
        v = scenario.f(scenario.p_te.sample(size, np.random.default_rng(child)))
        total += float(v.sum())
        total_sq += float((v * v).sum())
    mean = total / budget
    var = max(total_sq / budget - mean * mean, 0.0)
    return mean, math.sqrt(var / budget)


def tail_fraction(scenario: ScenarioSpec, B, n=200_000, seed=0):
    """Monte-Carlo ``Pr_{p_te}(p_te / p_tr > B/4)`` with its standard error."""
    x = scenario.p_te.sample(n, seed)
    with np.errstate(invalid="ignore", divide="ignore"):
        lr = scenario.p_te.log_density(x) - scenario.p_tr.log_density(x)
    hit = (lr > math.log(B / 4.0)).astype(float)
    p = float(hit.mean())
    return p, math.sqrt(p * (1 - p) / n)


def measure_assumptions(scenario: ScenarioSpec, B=20.0, n=200_000, seed=0) -> dict:
    """Tail fraction at ``B``, second ratio moments and Gaussian TV bounds."""
    out = {}
    tf, tf_se = tail_fraction(scenario, B, n, seed)
    out["tail_fraction"] = {"B": B, "value": tf, "stderr": tf_se}
    r2 = renyi_r2_mc(scenario.p_te, scenario.p_tr, n, seed=seed + 1)
    out["r2_te_tr"] = {"value": r2.value, "stderr": r2.stderr, "flags": list(r2.flags)}
    if isinstance(scenario.p_tr, GaussianModel) and isinstance(scenario.p_te, GaussianModel):
        out["kl_te_tr"] = kl_gaussian(scenario.p_te, scenario.p_tr)
        out["tv_upper_pinsker"] = tv_upper_pinsker(scenario.p_te, scenario.p_tr)
    return out


# ---------------------------------------------------------------------------
# Plans and trials


ESTIMATORS = ("gauss", "gauss-iso", "truncated", "logistic", "kernel-logistic", "kmm",
              "naive-plugin")

OPTION_DEFAULTS = {
    "kernel": {"kind": "rbf", "bandwidth": 1.0},
    "rkhs_norm_bound": 5.0,
    "weight_bound": 20.0,
    "mean_match_tol": None,
    "f_norm_bound": 1.0,
    "kmm_max_iters": 5_000,
    "naive_tol": 1e-3,
    "naive_max_iters": 5_000,
}


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: ScenarioSpec
    estimator: str
    n_grid: tuple
    trials_per_n: int
    root_seed: int = 0
    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    options: dict = field(default_factory=dict)
    oracle_precision: float = 1e-3
    plan_id: str = ""

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; valid: {', '.join(ESTIMATORS)}")
        grid = tuple(int(n) for n in self.n_grid)
        if not grid or any(n < 1 for n in grid):
            raise ConfigError("n_grid must be a nonempty list of positive sizes")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("n_grid must be strictly increasing")
        if int(self.trials_per_n) < 1:
            raise ConfigError("trials_per_n must be >= 1")
        unknown = set(self.options) - set(OPTION_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown estimator option {sorted(unknown)[0]!r}")
        object.__setattr__(self, "n_grid", grid)

    def option(self, key):
        return self.options.get(key, OPTION_DEFAULTS[key])

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "plan_id": self.plan_id,
            "scenario": self.scenario.to_dict(),
            "estimator": self.estimator,
            "n_grid": list(self.n_grid),
            "trials_per_n": self.trials_per_n,
            "root_seed": self.root_seed,
            "config": self.config.to_dict(),
            "options": dict(self.options),
            "oracle_precision": self.oracle_precision,
        }

    @classmethod
    def from_dict(cls, d: dict, scenario: ScenarioSpec | None = None) -> "ExperimentPlan":
        d = dict(d)
        check_version(d, "plan")
        allowed = {"format_version", "plan_id", "scenario", "scenario_path", "estimator",
                   "n_grid", "trials_per_n", "root_seed", "config", "options",
                   "oracle_precision"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in plan")
        if scenario is None:
            if "scenario" not in d:
                raise ConfigError("plan needs an inline scenario or a scenario_path")
            scenario = ScenarioSpec.from_dict(d["scenario"])
        cfg = dict(d.get("config") or {})
        unknown = set(cfg) - set(EstimatorConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in estimator config")
        for key in ("estimator", "n_grid", "trials_per_n"):
            if key not in d:
                raise ConfigError(f"plan is missing required key {key!r}")
        return cls(scenario, d["estimator"], tuple(d["n_grid"]), int(d["trials_per_n"]),
                   int(d.get("root_seed", 0)), EstimatorConfig(**cfg),
                   dict(d.get("options") or {}), float(d.get("oracle_precision", 1e-3)),
                   str(d.get("plan_id", "")))


@dataclass
class TrialRecord:
    estimator: str
    scenario_id: str
    n: int
    trial_index: int
    seed: int
    Z: float
    truth: float
    abs_error: float
    truncated_count: int
    n_labeled: int
    wall_ms: float
    converged: bool
    status: str = "ok"
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.status != "ok"


TRIAL_FIELDS = ("estimator", "scenario_id", "n", "trial_index", "seed", "Z", "truth",
                "abs_error", "truncated_count", "n_labeled", "converged", "status", "error")


def trial_seed(root_seed, n, trial_index) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed), int(n), int(trial_index)])


def run_estimator(scenario: ScenarioSpec, estimator: str, n: int, seed_seq,
                  config: EstimatorConfig, options: dict | None = None):
    """Draw one trial's data from ``seed_seq`` and run ``estimator`` on it."""
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; valid: {', '.join(ESTIMATORS)}")
    n = int(n)
    if n < 1:
        raise ConfigError("n must be >= 1")
    opts = dict(OPTION_DEFAULTS)
    opts.update(options or {})
    s_tr, s_te, s_lab, s_sub = (np.random.default_rng(s) for s in seed_seq.spawn(4))
    x, fx = scenario.sample_labeled(n, s_lab)
    kernel = KernelSpec.from_dict(opts["kernel"])
    if estimator in ("gauss", "gauss-iso"):
        if config.batch_size is None:
            config = replace(config, batch_size=max(n // config.t, 1))
        tr, te = scenario.p_tr.sample(n, s_tr), scenario.p_te.sample(n, s_te)
        return estimate_gaussian_plugin(tr, te, x, fx, config, isotropic=estimator == "gauss-iso")
    if estimator == "truncated":
        ratio = ExactRatio(scenario.p_te, scenario.p_tr)
        return estimate_truncated_ratio(x, fx, ratio, config)
    if estimator == "logistic":
        tr, te = scenario.p_tr.sample(n, s_tr), scenario.p_te.sample(n, s_te)
        sub_seed = int(s_sub.integers(2**31))
        return estimate_via_logistic(tr, te, x, fx, config, seed=sub_seed)
    if estimator == "kernel-logistic":
        tr, te = scenario.p_tr.sample(n, s_tr), scenario.p_te.sample(n, s_te)
        sub_seed = int(s_sub.integers(2**31))
        return estimate_via_kernel_logistic(tr, te, x, fx, kernel, opts["rkhs_norm_bound"],
                                            config, seed=sub_seed)
    te = scenario.p_te.sample(n, s_te)
    if estimator == "kmm":
        kc = KmmConfig(kernel=kernel, weight_bound=opts["weight_bound"],
                       mean_match_tol=opts["mean_match_tol"], max_iters=opts["kmm_max_iters"])
        return estimate_kmm(x, fx, te, kc)
    kc = KmmConfig(kernel=kernel, f_norm_bound=opts["f_norm_bound"], tol=opts["naive_tol"],
                   max_iters=opts["naive_max_iters"])
    return estimate_naive_plugin(x, fx, te, kc)


def _one_trial(plan: ExperimentPlan, truth: float, n: int, k: int) -> TrialRecord:
    ss = trial_seed(plan.root_seed, n, k)
    seed_id = int(ss.generate_state(1)[0])
    t0 = time.perf_counter()
    try:
        res = run_estimator(plan.scenario, plan.estimator, n, ss, plan.config, plan.options)
    except (CovshiftError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        ms = (time.perf_counter() - t0) * 1e3
        return TrialRecord(plan.estimator, plan.scenario.id, n, k, seed_id, math.nan, truth,
                           math.nan, 0, 0, ms, False, "failed", f"{type(exc).__name__}: {exc}")
    ms = (time.perf_counter() - t0) * 1e3
    conv = bool(res.diagnostics.get("converged", True))
    return TrialRecord(plan.estimator, plan.scenario.id, n, k, seed_id, res.value, truth,
                       abs(res.value - truth), res.truncated_count, res.n_labeled_used, ms, conv)


def plan_truth(plan: ExperimentPlan):
    return ground_truth(plan.scenario, precision=plan.oracle_precision)


def run_plan(plan: ExperimentPlan, workers=1, on_record=None, truth=None) -> list:
    """Run every ``(n, trial)`` cell of the plan.

    Records come back ordered by ``(n, trial_index)`` whatever ``workers``
    is; ``on_record`` sees them in that same order as they complete.
    Failing trials are recorded with ``status="failed"`` rather than raised.
    """
    plan.scenario.probe()
    if truth is None:
        truth = plan_truth(plan)[0]
    cells = [(n, k) for n in plan.n_grid for k in range(plan.trials_per_n)]
    out = []

    def emit(rec):
        out.append(rec)
        if on_record is not None:
            on_record(rec)

    if workers <= 1:
        for n, k in cells:
            emit(_one_trial(plan, truth, n, k))
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            for rec in pool.map(lambda c: _one_trial(plan, truth, *c), cells):
                emit(rec)
    return out


# ---------------------------------------------------------------------------
# Summaries


def median(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("median of empty input")
    return float(np.median(v))


def nearest_rank(values, pct) -> float:
    """Nearest-rank percentile: the ``ceil(pct/100 * N)``-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("percentile of empty input")
    rank = max(int(math.ceil(pct / 100.0 * v.size)), 1)
    return float(v[rank - 1])


SUMMARY_FIELDS = ("estimator", "scenario_id", "n", "n_trials", "n_failed", "median_abs_error",
                  "p10_abs_error", "p90_abs_error", "success_rate", "epsilon",
                  "mean_truncated_fraction", "flagged")


def summarize(records, epsilon=0.1) -> list:
    """Per-``n`` order statistics of the absolute error.

    Failed trials are counted but excluded from the statistics; a row whose
    trials all failed is flagged and carries no statistics.
    """
    records = list(records)
    if not records:
        raise ValueError("summarize needs at least one record")
    rows = []
    for n in sorted({r.n for r in records}):
        group = [r for r in records if r.n == n]
        ok = [r for r in group if not r.failed]
        row = {"estimator": group[0].estimator, "scenario_id": group[0].scenario_id, "n": n,
               "n_trials": len(group), "n_failed": len(group) - len(ok), "epsilon": epsilon}
        if not ok:
            row.update({k: None for k in ("median_abs_error", "p10_abs_error", "p90_abs_error",
                                          "success_rate", "mean_truncated_fraction")})
            row["flagged"] = True
        else:
            errs = [r.abs_error for r in ok]
            row.update({
                "median_abs_error": median(errs),
                "p10_abs_error": nearest_rank(errs, 10),
                "p90_abs_error": nearest_rank(errs, 90),
                "success_rate": sum(e <= epsilon for e in errs) / len(errs),
                "mean_truncated_fraction": float(np.mean(
                    [r.truncated_count / r.n_labeled if r.n_labeled else 0.0 for r in ok])),
                "flagged": False,
            })
        rows.append(row)
    return rows


def fit_loglog_slope(ns, medians=None):
    """Least-squares slope of ``ln(median error)`` on ``ln(n)``.

    Accepts either two sequences or a list of summary rows. Returns
    ``(slope, intercept, r_squared)``; ``r_squared`` is 1 for a perfect fit
    and also when the medians are constant.
    """
    if medians is None:
        rows = [r for r in ns if not r.get("flagged") and r.get("median_abs_error") is not None]
        ns = [r["n"] for r in rows]
        medians = [r["median_abs_error"] for r in rows]
    x = np.asarray(ns, dtype=float)
    y = np.asarray(medians, dtype=float)
    if x.size != y.size or x.size < 3:
        raise ValueError("need at least 3 grid points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("grid sizes and medians must be positive")
    if np.unique(x).size < 2:
        raise ValueError("degenerate grid: all n equal")
    lx, ly = np.log(x), np.log(y)
    a = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(a, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(resid @ resid) / ss_tot
    return float(slope), float(intercept), r2


def n_to_reach(rows, target=0.9):
    """Smallest ``n`` at which the success rate reaches ``target``.

    The success-rate curve is made monotone by a running maximum and the
    crossing is interpolated linearly in ``ln n``. Returns ``(n or None,
    best rate)``.
    """
    rows = sorted((r for r in rows if r.get("success_rate") is not None), key=lambda r: r["n"])
    if not rows:
        return None, None
    ns = [float(r["n"]) for r in rows]
    rates = np.maximum.accumulate([float(r["success_rate"]) for r in rows])
    best = float(rates[-1])
    if rates[0] >= target:
        return ns[0], best
    for i in range(1, len(ns)):
        if rates[i] >= target:
            lo, hi = math.log(ns[i - 1]), math.log(ns[i])
            frac = (target - rates[i - 1]) / (rates[i] - rates[i - 1])
            return math.exp(lo + frac * (hi - lo)), best
    return None, best
