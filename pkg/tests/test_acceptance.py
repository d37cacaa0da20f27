"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary by
``conftest.py``) before asserting.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from scalelaw import alloc
from scalelaw.alloc import PriceModel, solve_budget, solve_target
from scalelaw.evaluation import (
    axis_values,
    bootstrap,
    mbe_log,
    predict_grid,
    rmse_log,
    split_high_axis,
    split_high_axis_indices,
    split_kfold_indices,
)
from scalelaw.fit import EHinge, FitConfig, Objective, e_hinge_penalty, fit, huber, huber_grad, sample_init, warm_refit
from scalelaw.forms import FORM_IDS, OursParams, Point, predict_many
from scalelaw.gridio import RunRecord, cap_unique_data, clip_loss
from scalelaw.verify import SynthDesign, check_limits, chinchilla_map, recovery_gap, synth_grid

from conftest import LN10, TRUE, record

LLM_E, LLM_SPAN = 1.69, 9.13
LLM_L0 = LLM_E + LLM_SPAN
B_MAX = 1.0193961778760531e22
FARSEER_ANCHOR = dict(a1=0.0, a2=0.1, a3=0.5, b1=1.0, b2=-0.1, b3=1.0, c1=-1.0, c2=0.05, c3=-1.0)


def llm_params(c=2e3):
    return OursParams(e=LLM_E, a=44.5, b=45.0, c=c, alpha=0.34, beta=0.28, gamma=0.5, delta=1.0)


def random_params(rng):
    """Valid parameters whose terms settle within 1e+-12 (exponents >= 0.7)."""
    e = rng.uniform(0.1, 2.0)
    span = rng.uniform(0.5, 10.0)
    coef = np.exp(rng.uniform(math.log(0.1), math.log(10.0), 3))
    expo = rng.uniform(0.7, 1.5, 4)
    return OursParams(e, *coef, *expo), e + span


# ---------------------------------------------------------------------------
# 1. limit suite
# ---------------------------------------------------------------------------


def test_c1_limit_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    worst = 0.0
    for _ in range(100):
        p, l0 = random_params(rng)
        rep = check_limits("ours", p, l0)
        failures += not rep.all_pass
        worst = max(worst, max(r.deviation / r.tolerance for r in rep.rows))
    chin = check_limits("chinchilla", {"e": 1.0, "A": 1.0, "B": 1.0, "alpha": 1.0, "beta": 1.0}, 3.0)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and chin.pattern[:5] == (False,) * 5 and elapsed < 5.0
    record("1 limit suite", ok, f"failures={failures} worst dev/tol={worst:.2e} chinchilla={chin.pattern} {elapsed:.2f}s")
    assert failures == 0
    assert chin.pattern[:5] == (False,) * 5
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 2. Chinchilla recovery
# ---------------------------------------------------------------------------


def test_c2_chinchilla_recovery():
    a, b = chinchilla_map(406.0, 411.0, LLM_E, LLM_L0)
    assert (a, b) == pytest.approx((44.5, 45.0), abs=0.05)
    p = OursParams(e=LLM_E, a=a, b=b, c=2e3, alpha=0.34, beta=0.28, gamma=0.5, delta=1.0)
    rng = np.random.default_rng(7)
    checked, worst = 0, 0.0
    while checked < 1000:
        n = math.exp(rng.uniform(math.log(1e8), math.log(1e13)))
        d = math.exp(rng.uniform(math.log(1e10), math.log(1e14)))
        g = recovery_gap(p, LLM_L0, Point(n, d, d), overfit_ratio=math.inf)
        if g.h > 0.1:
            continue
        checked += 1
        worst = max(worst, g.gap / g.bound)
    ok = worst <= 1.0
    record("2 chinchilla recovery", ok, f"1000 points, max gap/bound={worst:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 3. synthetic recovery
# ---------------------------------------------------------------------------

DESIGN = SynthDesign(
    n_values=np.logspace(5, 8, 5),
    d_values=np.logspace(4, 7, 5),
    epochs=(1, 2, 4, 8, 16, 32, 64, 128),
)


def _grid_rmse(params, l0, design):
    n, d, t = design.cells().T
    truth = predict_many("ours", TRUE, n, d, t, None, l0)
    got = predict_many("ours", params, n, d, t, None, l0)
    return rmse_log(got, truth)


def test_c3_synthetic_recovery():
    start = time.perf_counter()
    assert DESIGN.size == 200
    grid = synth_grid(TRUE, LN10, DESIGN)
    res = fit("ours", grid, FitConfig(seed=0))
    fitted = OursParams.from_mapping(res.params.values)
    in_rmse = _grid_rmse(fitted, LN10, DESIGN)
    ext_rmse = _grid_rmse(fitted, LN10, DESIGN.extended())
    true_vals, got = TRUE.as_dict(), fitted.as_dict()
    rel = {k: abs(got[k] / v - 1) for k, v in true_vals.items()}
    tight = max(rel[k] for k in ("e", "a", "b", "alpha", "beta"))
    loose = max(rel[k] for k in ("c", "gamma", "delta"))

    sigma = 0.01
    noisy = synth_grid(TRUE, LN10, SynthDesign(DESIGN.n_values, DESIGN.d_values, DESIGN.epochs, sigma, seed=11))
    train, hold = split_high_axis(noisy, "c")
    nres = fit("ours", train, FitConfig(seed=0))
    hold_rmse = rmse_log(predict_grid(nres, hold), hold.loss)
    elapsed = time.perf_counter() - start

    ok = (
        in_rmse < 1e-6 and ext_rmse < 1e-3 and tight < 0.01 and loose < 0.05
        and sigma / 2 <= hold_rmse <= 2 * sigma and elapsed < 120
    )
    record(
        "3 synthetic recovery", ok,
        f"rmse in={in_rmse:.1e} ext={ext_rmse:.1e} rel tight={tight:.1e} loose={loose:.1e} "
        f"noisy holdout={hold_rmse:.4f} {elapsed:.1f}s",
    )
    assert in_rmse < 1e-6 and ext_rmse < 1e-3
    assert tight < 0.01 and loose < 0.05
    assert sigma / 2 <= hold_rmse <= 2 * sigma
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 4. closed forms
# ---------------------------------------------------------------------------


def _brute_nopt(p, d):
    def h(x):
        return p.a * math.exp(-p.alpha * x) + p.c * math.exp(p.gamma * x - p.delta * math.log(d))

    xs = np.linspace(-50.0, 150.0, 4001)
    i = int(np.argmin([h(x) for x in xs]))
    ref = minimize_scalar(h, bracket=(xs[i - 1], xs[i], xs[i + 1]), tol=1e-14)
    return math.exp(ref.x)


def test_c4_closed_forms():
    rng = np.random.default_rng(4)
    worst_brute = worst_chin = worst_asym = 0.0
    for _ in range(100):
        p = OursParams(
            e=1.0,
            a=math.exp(rng.uniform(-2, 5)),
            b=math.exp(rng.uniform(-2, 5)),
            c=math.exp(rng.uniform(-2, 5)),
            alpha=rng.uniform(0.2, 1.2),
            beta=rng.uniform(0.2, 1.2),
            gamma=rng.uniform(0.2, 1.2),
            delta=rng.uniform(0.3, 1.5),
        )
        d = math.exp(rng.uniform(math.log(1e6), math.log(1e12)))
        C = math.exp(rng.uniform(math.log(1e15), math.log(1e24)))
        worst_brute = max(worst_brute, abs(alloc.nopt_asymptotic(p, d) / _brute_nopt(p, d) - 1))
        worst_chin = max(worst_chin, abs(alloc.nopt_finite(p, C, 1e300) / alloc.nopt_chinchilla(p, C) - 1))
        worst_asym = max(worst_asym, abs(alloc.nopt_finite(p, 1e300, d) / alloc.nopt_asymptotic(p, d) - 1))
    # derived values from a 50-digit evaluation; printed as 3.39e11 and 1.41e9
    p = llm_params()
    n1, n2 = alloc.nopt_asymptotic(p, 3.2e11), alloc.nopt_asymptotic(p, 3.2e9)
    g1 = abs(n1 / 338648142658.26836277 - 1)
    g2 = abs(n2 / 1408628000.7958901567 - 1)
    printed = float(f"{n1:.2e}") == 3.39e11 and float(f"{n2:.2e}") == 1.41e9
    ok = max(worst_brute, worst_chin, worst_asym) < 1e-6 and max(g1, g2) < 1e-3 and printed
    record(
        "4 closed forms", ok,
        f"brute={worst_brute:.1e} ->chinchilla={worst_chin:.1e} ->asymptotic={worst_asym:.1e} "
        f"derived values {g1:.1e}/{g2:.1e} rounded={printed}",
    )
    assert worst_brute < 1e-6 and worst_chin < 1e-6 and worst_asym < 1e-6
    assert g1 < 1e-3 and g2 < 1e-3 and printed


# ---------------------------------------------------------------------------
# 5. convexity and duality
# ---------------------------------------------------------------------------

SYM = OursParams(e=0.5, a=1.0, b=1.0, c=1.0, alpha=1.0, beta=1.0, gamma=1.0, delta=1.0)
SCENARIOS = {
    "symmetric": (SYM, 3.0, PriceModel(1.0, 1.0, 1.0), 1e6),
    "llm": (llm_params(), LLM_L0, PriceModel(1e12), B_MAX),
}


def _brute_force(p, l0, prices, budget, res, half_width=3.0, points=41):
    # offset by a fraction of a cell so the solver's point is not a grid node
    shift = 0.37 * 2 * half_width / (points - 1)
    axes = [
        np.linspace(math.log(v) - half_width, math.log(v) + half_width, points) + shift
        for v in (res.n_star, res.d_star, res.t_star)
    ]
    u, v, w = np.meshgrid(*axes, indexing="ij")
    n, d, t = np.exp(u).ravel(), np.exp(v).ravel(), np.exp(w).ravel()
    feasible = prices.cost(n, d, t) <= budget
    losses = predict_many("ours", p, n[feasible], d[feasible], t[feasible], None, l0)
    return float(losses.min()), axes[0][1] - axes[0][0]


@pytest.mark.parametrize("name", list(SCENARIOS))
def test_c5_convexity_duality(name):
    p, l0, prices, budget = SCENARIOS[name]
    start = time.perf_counter()
    base = solve_budget(p, l0, prices, budget)
    rng = np.random.default_rng(5)
    spread = 0.0
    for _ in range(10):
        n0 = base.n_star * math.exp(rng.uniform(-5, 5))
        d0 = budget / prices.rho_d * math.exp(rng.uniform(math.log(1e-4), math.log(0.99)))
        r = solve_budget(p, l0, prices, budget, start=(n0, d0))
        spread = max(spread, *(abs(getattr(r, k) / getattr(base, k) - 1) for k in ("n_star", "d_star", "t_star")))
    dual = solve_target(p, l0, prices, base.loss)
    trip = max(abs(getattr(dual, k) / getattr(base, k) - 1) for k in ("n_star", "d_star", "t_star", "cost"))
    brute, _ = _brute_force(p, l0, prices, budget, base)
    beats = (base.loss - brute) / base.loss
    elapsed = time.perf_counter() - start
    ok = spread < 1e-4 and base.foc_residual <= 1e-6 and dual.foc_residual <= 1e-6 and trip < 1e-4 and beats <= 1e-12 and elapsed < 30
    record(
        f"5 convexity/duality [{name}]", ok,
        f"starts spread={spread:.1e} foc={base.foc_residual:.1e}/{dual.foc_residual:.1e} "
        f"round trip={trip:.1e} brute-force margin={-beats:.1e} {elapsed:.2f}s",
    )
    assert spread < 1e-4
    assert base.foc_residual <= 1e-6 and dual.foc_residual <= 1e-6
    assert trip < 1e-4
    assert beats <= 1e-12
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 6. Table 2 trends
# ---------------------------------------------------------------------------


def test_c6_table2_trends():
    p = llm_params()
    rows = [solve_budget(p, LLM_L0, PriceModel(eta), B_MAX) for eta in (0.0, 1e10, 1e12, 1e13)]
    d = [r.d_star for r in rows]
    epochs = [r.epochs for r in rows]
    share = [r.data_share for r in rows]
    n0 = rows[0].n_star
    ok = (
        abs(n0 / 5.2e9 - 1) < 0.01
        and all(x > y for x, y in zip(d, d[1:]))
        and all(x < y for x, y in zip(epochs, epochs[1:]))
        and 300 <= epochs[-1] <= 3000
        and all(x < y for x, y in zip(share, share[1:]))
        and share[-1] > 0.8
    )
    table = " | ".join(f"n={r.n_star:.2g} d={r.d_star:.2g} ep={r.epochs:.3g} share={r.data_share:.2f}" for r in rows)
    record("6 table trends", ok, table)
    assert abs(n0 / 5.2e9 - 1) < 0.01
    assert all(x > y for x, y in zip(d, d[1:]))
    assert all(x < y for x, y in zip(epochs, epochs[1:]))
    assert 300 <= epochs[-1] <= 3000
    assert all(x < y for x, y in zip(share, share[1:])) and share[-1] > 0.8


# ---------------------------------------------------------------------------
# 7. fitting protocol
# ---------------------------------------------------------------------------


def test_c7_protocol_fidelity(small_grid):
    tau = 0.05
    knee = huber(tau) == 0.5 * tau * tau == tau * (tau - 0.5 * tau)
    slope = huber_grad(tau) == tau and huber_grad(-tau) == -tau

    cfg = FitConfig(e_hinge=EHinge(kappa=1.5, lambda_per_row=0.25))
    m = float(small_grid.loss.min())
    above = dict(TRUE.as_dict(), e=m / 1.5)
    noop = Objective("ours", small_grid, cfg).value(above) == Objective("ours", small_grid, FitConfig()).value(above)
    closed = abs(e_hinge_penalty(0.5, 1.5, 1.5, 10.0) - 10 * math.log(2) ** 2) <= 1e-12

    l0 = LN10
    below = clip_loss(RunRecord(1, 1, 1, l0 - 0.01), l0)
    over = clip_loss(RunRecord(1, 1, 1, math.nextafter(l0 - 0.01, math.inf)), l0)
    clip_ok = (not below[1]) and over[1] and over[0].loss == l0 - 0.01

    r = cap_unique_data(RunRecord(1, 1e9, 3e8, 1.0))
    cap_ok = cap_unique_data(r) == r and r.d == 3e8

    point = warm_refit("ours", small_grid, TRUE.as_dict())
    boot = bootstrap("ours", small_grid, FitConfig(), b=200, point=point)
    width = max(abs(s["q97.5"] - s["q2.5"]) / abs(TRUE.as_dict()[k]) for k, s in boot["params"].items())
    boot_ok = boot["failed"] == 0 and width <= 1e-6

    ok = knee and slope and noop and closed and clip_ok and cap_ok and boot_ok
    record(
        "7 protocol fidelity", ok,
        f"knee={knee and slope} hinge no-op={noop} closed form={closed} clip={clip_ok} cap={cap_ok} "
        f"bootstrap b=200 rel width={width:.1e}",
    )
    assert knee and slope
    assert noop and closed
    assert clip_ok and cap_ok
    assert boot_ok


# ---------------------------------------------------------------------------
# 8. gradient checks
# ---------------------------------------------------------------------------


def test_c8_gradient_checks(small_grid):
    worst = {}
    for form in FORM_IDS:
        cfg = FitConfig(farseer_anchor=FARSEER_ANCHOR if form == "farseer" else None)
        obj = Objective(form, small_grid, cfg)
        rng = np.random.default_rng(8)
        done, err, attempts = 0, 0.0, 0
        while done < 20:
            attempts += 1
            assert attempts < 2000, f"{form}: too few informative points"
            start = sample_init(form, rng, cfg, float(small_grid.loss.min()))
            x = obj.spec.to_unconstrained(start.values)
            f, g = obj(x)
            if not math.isfinite(f):
                continue
            fd = np.empty_like(x)
            for i in range(x.size):
                h = 1e-6 * max(1.0, abs(x[i]))
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd[i] = (obj(xp)[0] - obj(xm)[0]) / (2 * h)
            # central differences carry ~1e-9 rounding noise; points where the
            # wrapper saturates and the objective is flat say nothing
            if not np.linalg.norm(fd) >= 1e-4:
                continue
            err = max(err, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
            done += 1
        worst[form] = err
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    ok = not bad
    record("8 gradient checks", ok, f"13 forms x 20 points, max rel err={max(worst.values()):.1e}")
    assert not bad, bad


# ---------------------------------------------------------------------------
# 9. split machinery
# ---------------------------------------------------------------------------


def test_c9_protocol_machinery(noisy_grid):
    groups_ok, frac_ok = True, True
    for axis in ("c", "d", "n", "t"):
        vals = axis_values(noisy_grid, axis)
        train, hold = split_high_axis_indices(noisy_grid, axis, 0.10)
        groups_ok &= not set(vals[train]) & set(vals[hold])
        frac_ok &= hold.size >= 0.10 * len(noisy_grid)
    part_ok = True
    for k in (2, 5, 10):
        folds = split_kfold_indices(len(noisy_grid), k, seed=k)
        held = np.sort(np.concatenate([h for _, h in folds]))
        part_ok &= np.array_equal(held, np.arange(len(noisy_grid)))
        part_ok &= all(np.intersect1d(tr, ho).size == 0 and tr.size + ho.size == len(noisy_grid) for tr, ho in folds)
    pred = predict_many("ours", TRUE, noisy_grid.n, noisy_grid.d, noisy_grid.t, None, LN10)
    r = np.log(pred) - np.log(noisy_grid.loss)
    decomp = abs(rmse_log(pred, noisy_grid.loss) ** 2 - (mbe_log(pred, noisy_grid.loss) ** 2 + np.var(r)))
    ok = groups_ok and frac_ok and part_ok and decomp <= 1e-12
    record("9 protocol machinery", ok, f"groupwise={groups_ok} holdout>=10%={frac_ok} kfold exact={part_ok} decomposition={decomp:.1e}")
    assert groups_ok and frac_ok and part_ok
    assert decomp <= 1e-12
