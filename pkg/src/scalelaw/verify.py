"""Structural checks and synthetic data.

* :func:`check_limits` drives coordinates to ``1e-12`` / ``1e12`` and checks
  where a form's loss lands (the baseline ``l0`` or its floor).
* :func:`chinchilla_map` and :func:`recovery_gap` relate the saturating law
  to the additive Chinchilla form at small difficulty.
* :func:`synth_grid` samples a known law on a lattice, the oracle used to
  test fitting.
* :func:`isoflop_curves` emits fixed-compute loss curves and their envelopes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .forms import FormParams, OursParams, Point, get_form, predict, predict_many
from .gridio import CLIP_MARGIN, Grid, RunRecord, make_grid

LIMIT_HI = 1e12
LIMIT_RTOL = 1e-6


# ---------------------------------------------------------------------------
# Limit audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LimitRow:
    row: int
    description: str
    target: str
    expected: float
    value: float
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation < self.tolerance)


@dataclass(frozen=True)
class LimitReport:
    form: str
    rows: tuple[LimitRow, ...]

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def pattern(self) -> tuple[bool, ...]:
        return tuple(r.passed for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "rows": [
                {
                    "row": r.row,
                    "limit": r.description,
                    "target": r.target,
                    "expected": r.expected,
                    "value": r.value,
                    "deviation": r.deviation,
                    "tolerance": r.tolerance,
                    "pass": r.passed,
                }
                for r in self.rows
            ],
        }


def _floor_of(fp: FormParams) -> float:
    if "e" in fp.values:
        return fp["e"]
    if "a_bnsl" in fp.values:
        return fp["a_bnsl"]
    if fp.form == "kaplan":
        return 0.0
    return math.nan


def _row6_path(fp: FormParams, s: float) -> Point:
    gamma = fp.values.get("gamma", 0.0)
    delta = fp.values.get("delta", 0.0)
    if fp.form == "ours-single-exp":
        delta = gamma
    power = max(2.0, 2.0 * gamma / delta) if delta > 0 else 2.0
    # keep d representable
    power = min(power, 300.0 / math.log10(s))
    return Point(s, s**power, s * s)


def check_limits(form: str, params, l0: float, extreme: float = LIMIT_HI, **form_options) -> LimitReport:
    """Audit the six limiting behaviours of a loss surface.

    Rows 1-5 expect the baseline ``l0``; row 6 follows a path along which
    every difficulty term vanishes and expects the floor.  Forms without a
    separate ``t`` axis (see ``FormSpec.data_axis``) are probed at ``d = t``
    for row 3.  The tolerance is ``(l0 - floor) * 1e-6``.

    ``extreme`` stands in for infinity (its reciprocal for zero).  Small
    fitted exponents may need a larger value than the default ``1e12``.
    """
    fp = params if isinstance(params, FormParams) else (
        params.to_form_params(form) if isinstance(params, OursParams) else FormParams(form, dict(params))
    )
    spec = get_form(form, **form_options)
    if not 1 < extreme <= 1e150:
        raise ValueError(f"extreme must be in (1, 1e150], got {extreme!r}")
    lo, hi = 1.0 / extreme, extreme
    floor = _floor_of(fp)
    tol = abs(l0 - floor) * LIMIT_RTOL if math.isfinite(floor) else 0.0
    row3 = Point(1.0, lo, lo) if spec.data_axis != "t" else Point(1.0, 1.0, lo)
    cases = [
        (1, "n -> 0", "l0", Point(lo, 1.0, 1.0)),
        (2, "d -> 0", "l0", Point(1.0, lo, 1.0)),
        (3, "t -> 0", "l0", row3),
        (4, "n -> inf, fixed d", "l0", Point(hi, 1.0, 1.0)),
        (5, "n, t -> inf, fixed d", "l0", Point(hi, 1.0, hi)),
        (6, "n = s, t = s^2, d = s^p, s -> inf", "floor", _row6_path(fp, hi)),
    ]
    rows = []
    for row, desc, target, pt in cases:
        expected = l0 if target == "l0" else floor
        value = predict(form, fp, pt, l0, **form_options)
        dev = abs(value - expected) if math.isfinite(value) else math.inf
        if not math.isfinite(expected):
            dev = math.inf
        rows.append(LimitRow(row, desc, target, expected, value, dev, tol))
    return LimitReport(form, tuple(rows))


# ---------------------------------------------------------------------------
# Chinchilla recovery
# ---------------------------------------------------------------------------


def chinchilla_map(A: float, B: float, e: float, l0: float) -> tuple[float, float]:
    """Coefficients of the saturating law matching Chinchilla at small h."""
    if not l0 > e:
        raise ValueError(f"need l0 > e, got l0={l0!r}, e={e!r}")
    span = l0 - e
    return A / span, B / span


def chinchilla_unmap(a: float, b: float, e: float, l0: float) -> tuple[float, float]:
    if not l0 > e:
        raise ValueError(f"need l0 > e, got l0={l0!r}, e={e!r}")
    span = l0 - e
    return a * span, b * span


@dataclass(frozen=True)
class RecoveryGap:
    gap: float
    bound: float
    h: float
    applicable: bool

    @property
    def within(self) -> bool:
        return (not self.applicable) or self.gap <= self.bound * (1.0 + 1e-6)


def recovery_gap(params: OursParams, l0: float, pt: Point, h_max: float = 0.1, overfit_ratio: float = 1e-3) -> RecoveryGap:
    """Distance between the saturating law (overfitting term off) and its Chinchilla image.

    The bound ``(l0 - e) h^2`` is claimed only when ``h <= h_max`` and the
    overfitting term is at most ``overfit_ratio * h``; otherwise the result
    is flagged not applicable.
    """
    p = params
    h_keep = p.a * pt.n**-p.alpha + p.b * pt.t**-p.beta
    over = p.c * pt.n**p.gamma / pt.d**p.delta if p.c > 0 else 0.0
    h = h_keep + over
    applicable = h <= h_max and over <= overfit_ratio * h
    A, B = chinchilla_unmap(p.a, p.b, p.e, l0)
    dropped = OursParams(p.e, p.a, p.b, 0.0, p.alpha, p.beta, p.gamma, p.delta)
    ours = predict("ours", dropped, pt, l0)
    chin = predict("chinchilla", {"e": p.e, "A": A, "B": B, "alpha": p.alpha, "beta": p.beta}, Point(pt.n, pt.d, pt.d))
    return RecoveryGap(abs(ours - chin), (l0 - p.e) * h_keep**2, h_keep, applicable)


# ---------------------------------------------------------------------------
# Synthetic grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthDesign:
    """Lattice of ``(n, d, t = epochs * d)`` cells with log-normal noise."""

    n_values: Sequence[float]
    d_values: Sequence[float]
    epochs: Sequence[float] = (1.0,)
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_values", "d_values", "epochs"):
            vals = np.asarray(getattr(self, name), dtype=float)
            if vals.size == 0 or not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ValueError(f"{name} must be non-empty, finite and positive")
            object.__setattr__(self, name, tuple(float(v) for v in vals))
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma!r}")

    @property
    def size(self) -> int:
        return len(self.n_values) * len(self.d_values) * len(self.epochs)

    def cells(self) -> np.ndarray:
        """``(size, 3)`` array of ``(n, d, t)``."""
        n, d, m = np.meshgrid(self.n_values, self.d_values, self.epochs, indexing="ij")
        n, d, m = n.ravel(), d.ravel(), m.ravel()
        return np.column_stack([n, d, m * d])

    def extended(self, factor: float = 2.0) -> "SynthDesign":
        """Lattice with one extra value ``factor * max`` on every axis."""
        return SynthDesign(
            tuple(self.n_values) + (factor * max(self.n_values),),
            tuple(self.d_values) + (factor * max(self.d_values),),
            tuple(self.epochs) + (factor * max(self.epochs),),
            self.sigma,
            self.seed,
        )


def synth_grid(
    params,
    l0: float,
    design: SynthDesign,
    form: str = "ours",
    name: str = "synthetic",
    margin: float = CLIP_MARGIN,
) -> Grid:
    """Sample ``form`` on the design lattice; noise is ``exp(N(0, sigma^2))``."""
    cells = design.cells()
    n, d, t = cells.T
    loss = predict_many(form, params, n, d, t, None, l0)
    if design.sigma > 0:
        rng = np.random.default_rng(design.seed)
        loss = loss * np.exp(rng.normal(0.0, design.sigma, size=loss.size))
    records = [RunRecord(float(a), float(b), float(c), float(L)) for a, b, c, L in zip(n, d, t, loss)]
    return make_grid(records, l0, "cross-entropy", name, aggregate=None, margin=margin)


# ---------------------------------------------------------------------------
# isoFLOP curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    c: float
    n: float
    t: float
    loss: float
    curve: str
    optimal: bool = False


@dataclass(frozen=True)
class CurveTable:
    points: tuple[CurvePoint, ...] = field(default=())

    def curve(self, name: str, c: float | None = None) -> list[CurvePoint]:
        return [p for p in self.points if p.curve == name and (c is None or p.c == c)]

    def optimal(self, name: str = "isoflop") -> list[CurvePoint]:
        return [p for p in self.points if p.curve == name and p.optimal]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["curve", "c", "n", "t", "loss", "optimal"])
        for p in self.points:
            w.writerow([p.curve, repr(p.c), repr(p.n), repr(p.t), repr(p.loss), int(p.optimal)])
        return buf.getvalue()


def isoflop_curves(
    params: OursParams,
    l0: float,
    c_values: Sequence[float],
    d: float,
    k: float = 6.0,
    n_samples: int = 200,
    n_range: tuple[float, float] | None = None,
) -> CurveTable:
    """Loss versus n at fixed compute ``C = k n t`` for each C, at fixed d.

    n is sampled on a log-spaced grid (``n_range`` or, per C, three decades
    either side of ``sqrt(C / k)``).  The per-C minimum is flagged
    ``optimal``; an ``infinite-compute`` curve evaluates the ``t -> inf``
    limit over all sampled n and flags its own minimum.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if d <= 0 or k <= 0 or any(c <= 0 for c in c_values):
        raise ValueError("c_values, d and k must be positive")
    p = params
    span = p.e, l0 - p.e
    pts: list[CurvePoint] = []
    all_n = []
    for c in sorted(float(v) for v in c_values):
        if n_range is None:
            mid = math.sqrt(c / k)
            lo, hi = mid * 1e-3, mid * 1e3
        else:
            lo, hi = n_range
        n = np.geomspace(lo, hi, n_samples)
        all_n.append(n)
        t = c / (k * n)
        loss = predict_many("ours", p, n, np.full_like(n, d), t, None, l0)
        best = int(np.argmin(loss))
        pts += [
            CurvePoint(c, float(ni), float(ti), float(li), "isoflop", i == best)
            for i, (ni, ti, li) in enumerate(zip(n, t, loss))
        ]
    n_inf = np.unique(np.concatenate(all_n)) if all_n else np.geomspace(*(n_range or (1.0, 1e12)), n_samples)
    h_inf = p.a * n_inf**-p.alpha + (p.c * n_inf**p.gamma / d**p.delta if p.c > 0 else 0.0)
    loss_inf = span[0] + span[1] * h_inf / (1.0 + h_inf)
    best = int(np.argmin(loss_inf))
    pts += [
        CurvePoint(math.inf, float(ni), math.inf, float(li), "infinite-compute", i == best)
        for i, (ni, li) in enumerate(zip(n_inf, loss_inf))
    ]
    return CurveTable(tuple(pts))
