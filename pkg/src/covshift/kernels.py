"""Positive semidefinite kernels, Gram matrices and low-rank factors.

Three kernel families are supported::

    rbf         K(a, b) = exp(-||a - b||^2 / (2 * bandwidth^2))
    linear      K(a, b) = <a, b>
    polynomial  K(a, b) = (<a, b> + offset) ** degree

The solvers in :mod:`covshift.density_ratio` and :mod:`covshift.estimators`
never form an n x n Gram matrix. They work with a pivoted Cholesky factor
``L`` (n x r) such that ``max |K - L L^T| <= tol * max diag(K)``; for the
smooth kernels used here r stays in the tens even for n = 2e4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from covshift.errors import ConfigError, FactorizationError

KINDS = ("rbf", "linear", "polynomial")

# diagonal jitter ladder used to certify PSD-ness, relative to n
GRAM_JITTER = (0.0, 1e-10, 1e-8, 1e-6)


def as_points(x) -> np.ndarray:
    """Coerce scalars / 1-d lists / 2-d arrays to an (n, d) float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    if x.ndim != 2:
        raise ValueError(f"points must be at most 2-d, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    bandwidth: float = 1.0
    degree: int = 2
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "rbf" and not self.bandwidth > 0:
            raise ConfigError("rbf bandwidth must be positive")
        if self.kind == "polynomial":
            if int(self.degree) != self.degree or self.degree < 1:
                raise ConfigError("polynomial degree must be an integer >= 1")
            if self.offset < 0:
                raise ConfigError("polynomial offset must be >= 0")

    @classmethod
    def rbf(cls, bandwidth=1.0):
        return cls("rbf", bandwidth=float(bandwidth))

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def polynomial(cls, degree=2, offset=0.0):
        return cls("polynomial", degree=int(degree), offset=float(offset))

    def __call__(self, a, b) -> np.ndarray:
        """Cross-kernel matrix between point sets ``a`` (n, d) and ``b`` (m, d)."""
        a, b = as_points(a), as_points(b)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        if self.kind == "rbf":
            sq = (
                np.sum(a * a, axis=1)[:, None]
                + np.sum(b * b, axis=1)[None, :]
                - 2.0 * (a @ b.T)
            )
            np.maximum(sq, 0.0, out=sq)
            return np.exp(-sq / (2.0 * self.bandwidth**2))
        inner = a @ b.T
        if self.kind == "linear":
            return inner
        return (inner + self.offset) ** self.degree

    def diag(self, x) -> np.ndarray:
        """K(x_i, x_i) for each row, without forming the full matrix."""
        x = as_points(x)
        if self.kind == "rbf":
            return np.ones(x.shape[0])
        sq = np.sum(x * x, axis=1)
        if self.kind == "linear":
            return sq
        return (sq + self.offset) ** self.degree

    def to_dict(self) -> dict:
        if self.kind == "rbf":
            return {"kind": "rbf", "bandwidth": self.bandwidth}
        if self.kind == "linear":
            return {"kind": "linear"}
        return {"kind": "polynomial", "degree": self.degree, "offset": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        d = dict(d)
        allowed = {"kind", "bandwidth", "degree", "offset"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in kernel spec")
        return cls(**d)


def gram_matrix(kernel: KernelSpec, points) -> np.ndarray:
    """Dense symmetric Gram matrix, certified PSD by a jittered Cholesky.

    The returned matrix carries no jitter; jitter (``1e-10 * n`` and up) is
    only used to certify that a factorization exists.

    Raises
    ------
    FactorizationError
        If the matrix cannot be factorized even at the largest jitter, which
        signals a non-PSD custom kernel.
    """
    x = as_points(points)
    n = x.shape[0]
    if n < 1:
        raise ValueError("gram_matrix needs at least one point")
    g = kernel(x, x)
    g = 0.5 * (g + g.T)
    certify_psd(g)
    return g


def certify_psd(g: np.ndarray) -> float:
    """Return the smallest jitter multiplier (times n) at which ``g`` factorizes."""
    n = g.shape[0]
    for jit in GRAM_JITTER:
        try:
            linalg.cholesky(g + jit * n * np.eye(n), lower=True, check_finite=False)
            return jit
        except linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"Gram matrix of size {n} is not PSD even with jitter {GRAM_JITTER[-1]} * n"
    )


@dataclass(frozen=True, eq=False)
class LowRankFactor:
    """Pivoted Cholesky factor ``K ~= L L^T`` on a fixed point set.

    ``pivots`` index the rows of the original point set that were selected;
    ``factor[pivots]`` is lower triangular in pivot order.
    """

    factor: np.ndarray
    pivots: np.ndarray
    residual: float
    info: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def pivot_block(self) -> np.ndarray:
        return self.factor[self.pivots, :]

    def coefficients(self, w: np.ndarray) -> np.ndarray:
        """Representer coefficients on the pivot points for factor weights ``w``.

        With ``gamma = L_PP^{-T} w`` we have ``K[:, P] gamma = L w`` and
        ``gamma^T K_PP gamma = ||w||^2``.
        """
        if self.rank == 0:
            return np.zeros(0)
        return linalg.solve_triangular(self.pivot_block().T, w, lower=False)


def pivoted_cholesky(kernel: KernelSpec, points, tol=1e-10, max_rank=None) -> LowRankFactor:
    """Greedy diagonal-pivoted Cholesky of the Gram matrix of ``points``.

    Stops once every residual diagonal entry is at most ``tol * max diag(K)``.
    Because the residual is PSD, each off-diagonal residual entry is then
    bounded by the same quantity, so ``L L^T`` reproduces the Gram matrix to
    that absolute accuracy. Only ``rank`` kernel columns are ever evaluated.
    """
    x = as_points(points)
    n = x.shape[0]
    if n < 1:
        raise ValueError("pivoted_cholesky needs at least one point")
    max_rank = n if max_rank is None else min(int(max_rank), n)
    d = kernel.diag(x).astype(float)
    if np.any(d < 0):
        raise FactorizationError("kernel has a negative diagonal entry")
    scale = float(d.max())
    if scale == 0.0:
        return LowRankFactor(np.zeros((n, 0)), np.zeros(0, dtype=int), 0.0, {"scale": 0.0})
    threshold = tol * scale
    cols = []
    pivots = []
    resid = d.copy()
    while len(pivots) < max_rank:
        p = int(np.argmax(resid))
        rp = resid[p]
        if rp <= threshold:
            break
        col = kernel(x, x[p : p + 1])[:, 0]
        if cols:
            lmat = np.column_stack(cols)
            col = col - lmat @ lmat[p]
        col = col / np.sqrt(rp)
        # exact zeros on already-pivoted rows keep the pivot block triangular
        col[pivots] = 0.0
        cols.append(col)
        pivots.append(p)
        resid = resid - col * col
        resid[pivots] = 0.0
    factor = np.column_stack(cols) if cols else np.zeros((n, 0))
    res = float(max(resid.max(), 0.0))
    if res > threshold:
        raise FactorizationError(
            f"pivoted Cholesky hit max_rank={max_rank} with residual {res:.3e} > {threshold:.3e}"
        )
    return LowRankFactor(factor, np.asarray(pivots, dtype=int), res, {"scale": scale, "tol": tol})
