"""Cost-aware allocation of parameters, unique data and training examples.

Dollar cost is ``rho_d * d + rho_c * k * n * t``.  Because the loss is a
monotone function of the difficulty ``h``, both programs are solved on ``h``:

* P2 (:func:`solve_budget`) spends the whole budget.  The remaining compute
  fixes ``t``, which leaves ``ln h`` strictly convex in ``(ln n, ln d)``; it
  is minimized by damped Newton with the exact Hessian.
* P1 (:func:`solve_target`) splits the target ``h*`` among its terms with
  softmax weights, so every candidate sits exactly on the isoloss surface,
  and minimizes ``ln cost`` over the logits with BFGS.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .forms import InvalidParametersError, OursParams
from .optim import bfgs

# overfitting term is reported as negligible below this fraction of h
D_KILL_RATIO = 1e-12
WRAPPERS = ("rational", "exponential", "none")


class InfeasibleTargetError(ValueError):
    """A target loss outside ``(e, l0)``; ``kind`` is ``below-floor`` or ``trivial``."""

    kind = "infeasible"


class BelowFloorError(InfeasibleTargetError):
    kind = "below-floor"


class TrivialTargetError(InfeasibleTargetError):
    kind = "trivial"


class AllocationError(RuntimeError):
    """The solver failed to converge; carries the last iterate."""

    def __init__(self, message: str, last: dict | None = None):
        super().__init__(message)
        self.last = last or {}


@dataclass(frozen=True)
class PriceModel:
    """Dollars per unique example, dollars per FLOP, FLOPs per parameter-example."""

    rho_d: float
    rho_c: float = 1.0
    k: float = 6.0

    def __post_init__(self):
        if not (math.isfinite(self.rho_d) and self.rho_d >= 0):
            raise ValueError(f"rho_d must be finite and >= 0, got {self.rho_d!r}")
        if not (math.isfinite(self.rho_c) and self.rho_c > 0):
            raise ValueError(f"rho_c must be finite and > 0, got {self.rho_c!r}")
        if not (math.isfinite(self.k) and self.k > 0):
            raise ValueError(f"k must be finite and > 0, got {self.k!r}")

    @property
    def eta(self) -> float:
        return self.rho_d / self.rho_c

    def cost(self, n: float, d: float, t: float) -> float:
        return self.rho_d * d + self.rho_c * self.k * n * t


@dataclass(frozen=True)
class AllocationResult:
    """Optimal allocation with its diagnostics.

    ``multiplier`` is the loss reduction per marginal dollar for P2 and the
    marginal dollar cost per unit loss for P1.  ``degenerate`` marks a
    d-axis that does not affect the optimum (``c = 0`` or ``rho_d = 0``);
    with ``c = 0`` no unique data is worth buying and ``d_star`` is 0.
    """

    n_star: float
    d_star: float
    t_star: float
    loss: float
    cost: float
    epochs: float | None
    data_share: float
    foc_residual: float
    multiplier: float
    h: float
    program: str
    degenerate: bool = False
    n_iter: int = 0
    foc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "program": self.program,
            "n_star": self.n_star,
            "d_star": self.d_star,
            "t_star": self.t_star,
            "loss": self.loss,
            "cost": self.cost,
            "epochs": self.epochs,
            "data_share": self.data_share,
            "foc_residual": self.foc_residual,
            "multiplier": self.multiplier,
            "h": self.h,
            "degenerate": self.degenerate,
            "foc": dict(self.foc),
        }


# ---------------------------------------------------------------------------
# Wrapper helpers
# ---------------------------------------------------------------------------


def _check_wrapper(wrapper: str):
    if wrapper not in WRAPPERS:
        raise ValueError(f"wrapper must be one of {WRAPPERS}, got {wrapper!r}")


def _loss_from_h(h: float, e: float, l0: float, wrapper: str) -> float:
    if wrapper == "rational":
        return e + (l0 - e) * h / (1.0 + h)
    if wrapper == "exponential":
        return e - (l0 - e) * math.expm1(-h)
    return e + (l0 - e) * h


def _dloss_dh(h: float, e: float, l0: float, wrapper: str) -> float:
    if wrapper == "rational":
        return (l0 - e) / (1.0 + h) ** 2
    if wrapper == "exponential":
        return (l0 - e) * math.exp(-h)
    return l0 - e


def target_difficulty(l_target: float, e: float, l0: float, wrapper: str = "rational") -> float:
    """Difficulty a model must reach to hit ``l_target``.

    Raises :class:`BelowFloorError` when ``l_target <= e`` and
    :class:`TrivialTargetError` when ``l_target >= l0``.
    """
    _check_wrapper(wrapper)
    if not e < l0:
        raise InvalidParametersError(f"need e < l0, got e={e!r}, l0={l0!r}")
    if l_target <= e:
        raise BelowFloorError(f"target loss {l_target!r} is at or below the irreducible loss e={e!r}")
    if wrapper == "none":
        return (l_target - e) / (l0 - e)
    if l_target >= l0:
        raise TrivialTargetError(f"target loss {l_target!r} is at or above the baseline l0={l0!r}")
    if wrapper == "rational":
        return (l_target - e) / (l0 - l_target)
    return -math.log((l0 - l_target) / (l0 - e))


# ---------------------------------------------------------------------------
# Difficulty and first-order conditions
# ---------------------------------------------------------------------------


def _h(p: OursParams, n: float, d: float | None, t: float) -> float:
    out = p.a * n**-p.alpha + p.b * t**-p.beta
    if p.c > 0 and d:
        out += p.c * n**p.gamma / d**p.delta
    return out


def foc_ratios(p: OursParams, l0: float, prices: PriceModel, n, d, t, wrapper="rational") -> dict:
    """Marginal loss change per marginal dollar along each axis.

    All three ratios agree (and equal minus the budget multiplier) at an
    interior optimum.  The ``d`` ratio is omitted when the axis is degenerate.
    """
    h = _h(p, n, d, t)
    dl = _dloss_dh(h, p.e, l0, wrapper)
    over = p.c * n**p.gamma / d**p.delta if (p.c > 0 and d) else 0.0
    dh_dn = -p.alpha * p.a * n ** (-p.alpha - 1) + (p.gamma * over / n)
    dh_dt = -p.beta * p.b * t ** (-p.beta - 1)
    out = {
        "n": dl * dh_dn / (prices.rho_c * prices.k * t),
        "t": dl * dh_dt / (prices.rho_c * prices.k * n),
    }
    if p.c > 0 and d and prices.rho_d > 0:
        out["d"] = dl * (-p.delta * over / d) / prices.rho_d
    return out


def _foc_residual(ratios: dict) -> tuple[float, float]:
    vals = np.array(list(ratios.values()))
    mean = float(np.mean(vals))
    if mean == 0:
        return math.inf, 0.0
    return float(np.max(np.abs(vals - mean)) / abs(mean)), mean


def _check_params(p: OursParams, l0: float, wrapper: str):
    _check_wrapper(wrapper)
    if not (p.a > 0 and p.b > 0 and p.alpha > 0 and p.beta > 0):
        raise InvalidParametersError("allocation needs a, b, alpha, beta > 0")
    if p.c > 0 and p.delta <= 0:
        raise InvalidParametersError("allocation needs delta > 0 when c > 0")
    if not p.e < l0:
        raise InvalidParametersError(f"need e < l0, got e={p.e!r}, l0={l0!r}")


def _kill_d(p: OursParams, n: float, h: float) -> float:
    """Smallest d with c n^gamma / d^delta <= D_KILL_RATIO * h."""
    return math.exp((math.log(p.c) + p.gamma * math.log(n) - math.log(D_KILL_RATIO * h)) / p.delta)


def _result(p, l0, prices, n, d, t, wrapper, program, degenerate, n_iter, sign) -> AllocationResult:
    h = _h(p, n, d, t)
    ratios = foc_ratios(p, l0, prices, n, d, t, wrapper)
    resid, mean = _foc_residual(ratios)
    cost = prices.cost(n, d, t)
    mult = -mean if sign > 0 else (-1.0 / mean if mean else math.inf)
    return AllocationResult(
        n_star=float(n),
        d_star=float(d),
        t_star=float(t),
        loss=_loss_from_h(h, p.e, l0, wrapper),
        cost=float(cost),
        epochs=(t / d) if d > 0 else None,
        data_share=prices.rho_d * d / cost if cost > 0 else 0.0,
        foc_residual=resid,
        multiplier=mult,
        h=h,
        program=program,
        degenerate=degenerate,
        n_iter=n_iter,
        foc=ratios,
    )


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def nopt_asymptotic(p: OursParams, d: float) -> float:
    """Interior minimizer in n of ``a/n^alpha + c n^gamma / d^delta``."""
    if not (p.a > 0 and p.alpha > 0 and p.gamma > 0):
        raise InvalidParametersError("need a, alpha, gamma > 0")
    if p.c <= 0:
        raise InvalidParametersError("no interior minimum without the overfitting term (c = 0)")
    log_n = (math.log(p.alpha * p.a) + p.delta * math.log(d) - math.log(p.gamma * p.c)) / (p.alpha + p.gamma)
    return math.exp(log_n)


def nopt_chinchilla(p: OursParams, c_flops: float, k: float = 6.0) -> float:
    """Compute-optimal n with no overfitting term, at ``c_flops = k n t``."""
    if not (p.a > 0 and p.b > 0):
        raise InvalidParametersError("need a, b > 0")
    log_n = (
        math.log(p.alpha * p.a) + p.beta * math.log(c_flops) - math.log(p.beta * p.b) - p.beta * math.log(k)
    ) / (p.alpha + p.beta)
    return math.exp(log_n)


def nopt_finite(p: OursParams, c_flops: float, d: float, k: float = 6.0) -> float:
    """Minimizer in n of ``h`` at fixed compute ``c_flops = k n t`` and fixed d.

    Solves ``alpha a = beta b k^beta n^(alpha+beta) / C^beta + gamma c
    n^(alpha+gamma) / d^delta`` in ``x = ln n``; the right side is increasing
    so the bracketed root is unique.
    """
    if not (p.a > 0 and p.b > 0 and p.alpha > 0 and p.beta > 0):
        raise InvalidParametersError("need a, b, alpha, beta > 0")
    target = math.log(p.alpha * p.a)
    # each right-hand term as (log-intercept, slope in x)
    terms = [(math.log(p.beta * p.b) + p.beta * math.log(k) - p.beta * math.log(c_flops), p.alpha + p.beta)]
    if p.c > 0 and p.gamma > 0:
        terms.append((math.log(p.gamma * p.c) - p.delta * math.log(d), p.alpha + p.gamma))

    def g(x):
        logs = np.array([c0 + s * x for c0, s in terms])
        m = logs.max()
        return m + math.log(np.exp(logs - m).sum()) - target

    roots = [(target - c0) / s for c0, s in terms]
    hi = min(roots)
    lo = hi - math.log(2.0) / min(s for _, s in terms)
    if g(hi) <= 0:
        # the other term is negligible; the root sits at hi up to rounding
        return math.exp(hi)
    x = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return math.exp(x)


# ---------------------------------------------------------------------------
# P2: minimum loss at a budget
# ---------------------------------------------------------------------------


class _BudgetProblem:
    """``ln h(u, v)`` after eliminating t through the budget."""

    def __init__(self, p: OursParams, prices: PriceModel, budget: float):
        self.p, self.prices, self.budget = p, prices, budget
        self.log_t_scale = math.log(budget / (prices.rho_c * prices.k))
        self.v_max = math.log(budget / prices.rho_d)

    def t_of(self, u: float, v: float) -> float:
        q = self.prices.rho_d * math.exp(v) / self.budget
        return math.exp(self.log_t_scale + math.log1p(-q) - u)

    def eval(self, x, order: int = 2):
        u, v = x
        p = self.p
        if v >= self.v_max:
            return math.inf, None, None
        q = math.exp(v - self.v_max)
        log1mq = math.log1p(-q)
        f = np.array(
            [
                math.log(p.a) - p.alpha * u,
                math.log(p.b) - p.beta * (self.log_t_scale + log1mq - u),
                math.log(p.c) + p.gamma * u - p.delta * v,
            ]
        )
        m = f.max()
        w = np.exp(f - m)
        s = w.sum()
        val = m + math.log(s)
        if order == 0:
            return val, None, None
        r = q / (1.0 - q)
        grads = np.array([[-p.alpha, 0.0], [p.beta, p.beta * r], [p.gamma, -p.delta]])
        g = (w @ grads) / s
        hs = np.einsum("i,ij,ik->jk", w, grads, grads)
        hs[1, 1] += w[1] * p.beta * q / (1.0 - q) ** 2
        hess = hs / s - np.outer(g, g)
        return val, g, hess


def _newton(prob: _BudgetProblem, x0, max_iters: int = 200, max_step: float = 5.0):
    x = np.asarray(x0, dtype=float)
    f, g, H = prob.eval(x)
    if not math.isfinite(f):
        raise AllocationError("infeasible starting point", {"x": x.tolist()})
    for it in range(max_iters):
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -g
        dec = float(-g @ step)
        if dec < 0:
            step, dec = -g, float(g @ g)
        if dec < 1e-26 or np.max(np.abs(step)) < 1e-13:
            return x, it, True
        scale = min(1.0, max_step / np.max(np.abs(step)))
        # in the quadratic regime the decrease is below rounding of f
        slack = 8 * np.finfo(float).eps * max(1.0, abs(f)) if dec < 1e-12 else 0.0
        a = scale
        while True:
            xn = x + a * step
            fn, _, _ = prob.eval(xn, order=0)
            if math.isfinite(fn) and fn <= f - 1e-4 * a * dec + slack:
                break
            a *= 0.5
            if a < 1e-14:
                # no further decrease representable
                return x, it, dec < 1e-20
        x = xn
        f, g, H = prob.eval(x)
    return x, max_iters, False


def solve_budget(
    p: OursParams,
    l0: float,
    prices: PriceModel,
    b_max: float,
    wrapper: str = "rational",
    start: tuple[float, float] | None = None,
) -> AllocationResult:
    """Minimum loss spending at most ``b_max`` (P2).

    ``start`` optionally gives an initial ``(n, d)``; the default splits the
    budget evenly between data and compute with ``n = t``.
    """
    _check_params(p, l0, wrapper)
    if not (math.isfinite(b_max) and b_max > 0):
        raise ValueError(f"budget must be finite and > 0, got {b_max!r}")
    k, rc = prices.k, prices.rho_c
    if p.c == 0 or prices.rho_d == 0:
        n = nopt_chinchilla(p, b_max / rc, k)
        t = b_max / (rc * k * n)
        h = _h(p, n, None, t)
        d = 0.0 if p.c == 0 else _kill_d(p, n, h)
        return _result(p, l0, prices, n, d, t, wrapper, "P2", True, 0, +1)
    prob = _BudgetProblem(p, prices, b_max)
    if start is None:
        v0 = math.log(0.5 * b_max / prices.rho_d)
        u0 = 0.5 * math.log(0.5 * b_max / (rc * k))
    else:
        u0, v0 = math.log(start[0]), math.log(start[1])
    x, it, ok = _newton(prob, (u0, v0))
    n, d = math.exp(x[0]), math.exp(x[1])
    t = prob.t_of(*x)
    if not ok:
        raise AllocationError("budget solver did not converge", {"n": n, "d": d, "t": t, "iterations": it})
    return _result(p, l0, prices, n, d, t, wrapper, "P2", False, it, +1)


# ---------------------------------------------------------------------------
# P1: minimum cost at a target loss
# ---------------------------------------------------------------------------


def solve_target(
    p: OursParams,
    l0: float,
    prices: PriceModel,
    l_target: float,
    wrapper: str = "rational",
) -> AllocationResult:
    """Cheapest allocation reaching ``l_target`` (P1)."""
    _check_params(p, l0, wrapper)
    h_star = target_difficulty(l_target, p.e, l0, wrapper)
    if h_star > 1e6:
        warnings.warn(f"target loss is nearly trivial (h* = {h_star:.3g}); allocation is close to zero", RuntimeWarning, stacklevel=2)
    use_d = p.c > 0 and prices.rho_d > 0
    degenerate = not use_d
    k, rc, rd = prices.k, prices.rho_c, prices.rho_d

    # Search over the split of h* among its terms: w = softmax([z, 0]) gives
    # each term's share, and n, t, d follow in closed form.  This avoids the
    # cancellation in h* - (other terms) when one term dominates.
    log_h = math.log(h_star)

    def coords(z):
        zz = np.append(z, 0.0)
        log_w = zz - (zz.max() + math.log(np.exp(zz - zz.max()).sum()))
        ln_n = (math.log(p.a) - log_h - log_w[0]) / p.alpha
        ln_t = (math.log(p.b) - log_h - log_w[1]) / p.beta
        ln_d = (math.log(p.c) + p.gamma * ln_n - log_h - log_w[2]) / p.delta if use_d else None
        return log_w, ln_n, ln_t, ln_d

    def fun_grad(z):
        log_w, ln_n, ln_t, ln_d = coords(z)
        terms = [math.log(rc * k) + ln_n + ln_t]
        if use_d:
            terms.append(math.log(rd) + ln_d)
        m = max(terms)
        ex = np.exp(np.array(terms) - m)
        s = ex.sum()
        sc, sd = ex[0] / s, (ex[1] / s if use_d else 0.0)
        # d ln cost / d ln w_i, then chain through the softmax
        g_lw = np.array([-sc / p.alpha - sd * p.gamma / (p.alpha * p.delta), -sc / p.beta, -sd / p.delta])
        g_lw = g_lw[: len(log_w)]
        w = np.exp(log_w)
        g = g_lw - g_lw.sum() * w
        return m + math.log(s), g[:-1]

    z0 = np.zeros(2 if use_d else 1)
    res = bfgs(fun_grad, z0, grad_tol=1e-12, max_iters=2000)
    # ln cost is flat to rounding near the optimum; finish on the gradient
    z, g_norm = _polish_stationary(fun_grad, res.x)
    if not g_norm < 1e-9:
        raise AllocationError(
            f"target solver did not converge ({res.message})", {"z": z.tolist(), "grad_norm": g_norm}
        )
    _, ln_n, ln_t, ln_d = coords(z)
    n, t = math.exp(ln_n), math.exp(ln_t)
    if use_d:
        d = math.exp(ln_d)
    elif p.c > 0:
        d = _kill_d(p, n, h_star)
    else:
        d = 0.0
    return _result(p, l0, prices, n, d, t, wrapper, "P1", degenerate, res.n_iter, -1)


def _polish_stationary(fun_grad, x, steps: int = 8, fd: float = 1e-6):
    """Newton iterations on ``grad = 0`` with a central-difference Jacobian."""
    x = np.asarray(x, dtype=float)
    g = fun_grad(x)[1]
    best = float(np.max(np.abs(g)))
    for _ in range(steps):
        if best < 1e-14:
            break
        jac = np.empty((x.size, x.size))
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = fd
            jac[:, i] = (fun_grad(x + e)[1] - fun_grad(x - e)[1]) / (2 * fd)
        try:
            xn = x - np.linalg.solve(0.5 * (jac + jac.T), g)
        except np.linalg.LinAlgError:
            break
        gn = fun_grad(xn)[1]
        gn_norm = float(np.max(np.abs(gn)))
        if not gn_norm < best:
            break
        x, g, best = xn, gn, gn_norm
    return x, best


# ---------------------------------------------------------------------------
# Frontier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrontierPoint:
    budget: float
    loss: float
    allocation: AllocationResult


def pareto_frontier(
    p: OursParams,
    l0: float,
    prices: PriceModel,
    budgets: Sequence[float],
    wrapper: str = "rational",
) -> list[FrontierPoint]:
    """Solve P2 at each budget (positive, ascending)."""
    budgets = [float(b) for b in budgets]
    if any(not b > 0 for b in budgets):
        raise ValueError("budgets must be positive")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be strictly ascending")
    out = []
    for b in budgets:
        res = solve_budget(p, l0, prices, b, wrapper)
        out.append(FrontierPoint(b, res.loss, res))
    return out


FRONTIER_COLUMNS = ("budget", "loss", "n", "d", "t", "epochs", "data_share")


def frontier_rows(points: Sequence[FrontierPoint]) -> list[tuple]:
    return [
        (
            pt.budget,
            pt.loss,
            pt.allocation.n_star,
            pt.allocation.d_star,
            pt.allocation.t_star,
            pt.allocation.epochs,
            pt.allocation.data_share,
        )
        for pt in points
    ]
