"""First-order solvers for the small convex problems in this package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    n_iter: int
    converged: bool
    pg_norm: float
    history: list = field(default_factory=list)


def projected_gradient(fun_grad, x0, project, tol=1e-8, max_iters=50_000,
                       armijo_c=1e-4, shrink=0.5, keep_history=False) -> OptimResult:
    """Minimize a smooth convex function over a convex set.

    Each step starts from a Barzilai-Borwein trial length and backtracks
    (Armijo, ``f(x+) <= f(x) + c <g, x+ - x>``) until sufficient decrease,
    so the accepted loss sequence is non-increasing. Convergence is certified
    by the projected-gradient norm ``||x - P(x - grad f(x))|| <= tol``.

    Parameters
    ----------
    fun_grad : callable
        ``x -> (f(x), grad f(x))``.
    project : callable
        Euclidean projection onto the feasible set.
    """
    x = project(np.asarray(x0, dtype=float).copy())
    f, g = fun_grad(x)
    history = [f] if keep_history else []
    step = 1.0
    x_prev = g_prev = None
    pg = np.linalg.norm(x - project(x - g))
    for it in range(1, max_iters + 1):
        if pg <= tol:
            return OptimResult(x, f, it - 1, True, pg, history)
        if x_prev is not None:
            s = x - x_prev
            yv = g - g_prev
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy
        step = min(max(step, 1e-12), 1e12)
        while True:
            x_new = project(x - step * g)
            f_new, g_new = fun_grad(x_new)
            if f_new <= f + armijo_c * float(g @ (x_new - x)):
                break
            step *= shrink
            if step < 1e-20:
                # no decrease possible at machine precision
                return OptimResult(x, f, it, pg <= tol, pg, history)
        x_prev, g_prev = x, g
        x, f, g = x_new, f_new, g_new
        if keep_history:
            history.append(f)
        pg = np.linalg.norm(x - project(x - g))
    return OptimResult(x, f, max_iters, pg <= tol, pg, history)


def project_ball(v, radius) -> np.ndarray:
    """Euclidean projection onto ``{||v|| <= radius}`` by rescaling."""
    nrm = np.linalg.norm(v)
    if nrm <= radius:
        return v
    if radius <= 0:
        return np.zeros_like(v)
    return v * (radius / nrm)


def project_box_slab(v, lower, upper, sum_lo, sum_hi, tol=1e-13) -> np.ndarray:
    """Exact projection onto ``{lower <= x <= upper, sum_lo <= sum(x) <= sum_hi}``.

    The minimizer is ``clip(v - lam, lower, upper)`` for a scalar ``lam``
    found by bisection on the monotone map ``lam -> sum(clip(v - lam))``.
    """
    x = np.clip(v, lower, upper)
    s = x.sum()
    if sum_lo <= s <= sum_hi:
        return x
    target = sum_lo if s < sum_lo else sum_hi
    n = v.size
    lo_b = float(np.min(v - upper)) - 1.0
    hi_b = float(np.max(v - lower)) + 1.0
    # sum(clip(v - lam)) decreases in lam from n*upper to n*lower
    if not n * lower - 1e-12 <= target <= n * upper + 1e-12:
        raise ValueError("box and slab constraints are infeasible")
    for _ in range(200):
        mid = 0.5 * (lo_b + hi_b)
        sm = np.clip(v - mid, lower, upper).sum()
        if sm > target:
            lo_b = mid
        else:
            hi_b = mid
        if hi_b - lo_b <= tol * max(1.0, abs(mid)):
            break
    x = np.clip(v - 0.5 * (lo_b + hi_b), lower, upper)
    # put any leftover sum error on the free coordinates
    free = (x > lower) & (x < upper)
    if free.any():
        x[free] += (target - x.sum()) / free.sum()
        x = np.clip(x, lower, upper)
    return x
