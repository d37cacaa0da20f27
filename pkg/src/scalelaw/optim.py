"""Full-memory BFGS with a strong-Wolfe line search.

Written for small (≤ 20 parameter) smooth objectives whose domain may have
holes: a trial point returning a non-finite value is treated as "too far"
and the step is shrunk, rather than aborting the run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

FunGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    message: str


def _finite(f, g):
    return np.isfinite(f) and np.all(np.isfinite(g))


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    if not all(np.isfinite(v) for v in (a, fa, ga, b, fb, gb)) or a == b:
        return None
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    x = b - (b - a) * (gb + d2 - d1) / denom
    return x if np.isfinite(x) else None


def line_search_wolfe(
    fun_grad: FunGrad,
    x: np.ndarray,
    f0: float,
    g0: np.ndarray,
    p: np.ndarray,
    c1: float = 1e-4,
    c2: float = 0.9,
    alpha0: float = 1.0,
    max_evals: int = 40,
):
    """Bracket-and-zoom search for a step satisfying the strong Wolfe conditions.

    Returns ``(alpha, f, g)`` or ``None`` when no acceptable step was found.
    """
    dphi0 = float(g0 @ p)
    if dphi0 >= 0:
        return None

    def phi(a):
        f, g = fun_grad(x + a * p)
        return f, g, (float(g @ p) if _finite(f, g) else np.nan)

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = alpha0
    evals = 0
    lo = hi = None
    while evals < max_evals:
        f, g, d = phi(a)
        evals += 1
        if not _finite(f, g):
            # shrink into the finite region
            a = a_prev + 0.25 * (a - a_prev)
            continue
        if f > f0 + c1 * a * dphi0 or (evals > 1 and f >= f_prev):
            lo, hi = (a_prev, f_prev, d_prev), (a, f, d)
            break
        if abs(d) <= -c2 * dphi0:
            return a, f, g
        if d >= 0:
            lo, hi = (a, f, d), (a_prev, f_prev, d_prev)
            break
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    if lo is None:
        return None

    best = None
    while evals < max_evals:
        (a_lo, f_lo, d_lo), (a_hi, f_hi, d_hi) = lo, hi
        a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        width = right - left
        if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
            a = 0.5 * (a_lo + a_hi)
        if width <= 1e-16 * max(1.0, abs(right)):
            break
        f, g, d = phi(a)
        evals += 1
        if not _finite(f, g):
            hi = (a, np.inf, np.nan)
            continue
        if f > f0 + c1 * a * dphi0 or f >= f_lo:
            hi = (a, f, d)
        else:
            best = (a, f, g)
            if abs(d) <= -c2 * dphi0:
                return a, f, g
            if d * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (a, f, d)
    # fall back to the best sufficient-decrease point seen
    return best


def bfgs(
    fun_grad: FunGrad,
    x0,
    grad_tol: float = 1e-8,
    max_iters: int = 500,
    c1: float = 1e-4,
    c2: float = 0.9,
) -> OptimResult:
    """Minimize ``fun_grad`` from ``x0``.

    Converged means the max-norm of the gradient fell below ``grad_tol``
    within ``max_iters`` iterations.
    """
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite starting point")
    f, g = fun_grad(x)
    if not _finite(f, g):
        return OptimResult(x, float(f), np.asarray(g), 0, False, "non-finite objective at start")
    n = x.size
    eye = np.eye(n)
    H = eye.copy()
    fresh = True
    for it in range(max_iters):
        if np.max(np.abs(g)) < grad_tol:
            return OptimResult(x, float(f), g, it, True, "gradient tolerance reached")
        p = -H @ g
        if g @ p >= 0:
            H, fresh = eye.copy(), True
            p = -g
        alpha0 = min(1.0, 1.0 / max(np.max(np.abs(p)), 1e-300)) if fresh else 1.0
        found = line_search_wolfe(fun_grad, x, f, g, p, c1, c2, alpha0)
        if found is None:
            if fresh:
                return OptimResult(x, float(f), g, it, False, "line search failed")
            H, fresh = eye.copy(), True
            continue
        a, f_new, g_new = found
        s = a * p
        y = g_new - g
        x, f, g = x + s, f_new, g_new
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                # scale the initial inverse Hessian to the observed curvature
                H = eye * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
            fresh = False
    converged = bool(np.max(np.abs(g)) < grad_tol)
    return OptimResult(x, float(f), g, max_iters, converged, "gradient tolerance reached" if converged else "iteration limit")
