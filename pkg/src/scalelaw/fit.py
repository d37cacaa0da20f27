"""Robust multistart fitting of scaling-law forms.

The objective is a Huber sum over log residuals, minimized by BFGS in the
form's unconstrained coordinates.  Each restart draws its initial point from
an RNG stream keyed by ``(seed, restart_index)``, so serial and parallel runs
produce identical results.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .forms import FormParams, FormSpec, get_form, softplus
from .gridio import ConfigError, Grid
from .optim import bfgs

HUBER_TAU = 0.05
DEFAULT_RESTARTS = 30
FARSEER_RESTARTS = 200
WORKERS_ENV = "SCALELAW_WORKERS"

# sampling ranges by parameter role
E_RANGE = (0.5, 3.0)
EXPONENT_RANGE = (0.1, 0.7)
COEF_RANGE = (0.01, 1000.0)
BREAK_RANGE = (10.0, 1e6)
DRIFT_RANGE = (-0.02, 0.02)
ANCHOR_JITTER = 0.30


class FitError(RuntimeError):
    """No restart converged; carries per-restart diagnostics."""

    def __init__(self, message: str, restarts: Sequence["RestartStat"] = ()):
        super().__init__(message)
        self.restarts = list(restarts)


@dataclass(frozen=True)
class EHinge:
    """One-sided quadratic prior on ``ln e`` below ``m / kappa``."""

    kappa: float = 1.5
    lambda_per_row: float = 0.25

    def __post_init__(self):
        if not self.kappa > 1:
            raise ConfigError(f"hinge kappa must be > 1, got {self.kappa!r}")
        if not self.lambda_per_row >= 0:
            raise ConfigError(f"hinge lambda_per_row must be >= 0, got {self.lambda_per_row!r}")


@dataclass(frozen=True)
class FitConfig:
    """Fitting options.  ``restarts=None`` picks 30 (200 for farseer)."""

    restarts: int | None = None
    huber_tau: float = HUBER_TAU
    max_iters: int = 500
    grad_tol: float = 1e-8
    seed: int = 0
    init_ranges: Mapping[str, tuple] = field(default_factory=dict)
    e_hinge: EHinge | None = None
    farseer_anchor: Mapping[str, float] | None = None
    m4_axis: str = "d"
    bnsl_scalar: str = "compute"
    k: float = 6.0
    workers: int | None = None

    def __post_init__(self):
        if self.restarts is not None and self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts!r}")
        if not self.huber_tau > 0:
            raise ConfigError(f"huber_tau must be > 0, got {self.huber_tau!r}")
        if self.max_iters < 1 or not self.grad_tol > 0:
            raise ConfigError("max_iters must be >= 1 and grad_tol > 0")

    def n_restarts(self, form: str) -> int:
        if self.restarts is not None:
            return self.restarts
        return FARSEER_RESTARTS if form == "farseer" else DEFAULT_RESTARTS

    def spec(self, form: str) -> FormSpec:
        try:
            return get_form(form, m4_axis=self.m4_axis, bnsl_scalar=self.bnsl_scalar, k=self.k)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("workers")
        out["init_ranges"] = {k: list(v) for k, v in sorted(self.init_ranges.items())}
        if self.farseer_anchor is not None:
            out["farseer_anchor"] = dict(sorted(self.farseer_anchor.items()))
        return out


def config_hash(form: str, config: FitConfig) -> str:
    payload = json.dumps({"form": form, **config.to_dict()}, sort_keys=True, default=repr)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RestartStat:
    converged: bool
    objective: float
    n_iter: int = 0


@dataclass(frozen=True)
class FitResult:
    """Best converged restart plus diagnostics."""

    form: str
    params: FormParams
    objective: float
    restarts: tuple[RestartStat, ...]
    seed: int
    grid: str
    config_hash: str
    l0: float
    clipped_rows: int = 0
    options: Mapping[str, object] = field(default_factory=dict)
    bootstrap: Mapping | None = None

    @property
    def n_converged(self) -> int:
        return sum(r.converged for r in self.restarts)

    def to_dict(self) -> dict:
        out = {
            "form": self.form,
            "params": dict(self.params.values),
            "objective": self.objective,
            "restarts": [{"converged": r.converged, "objective": r.objective} for r in self.restarts],
            "seed": self.seed,
            "grid": self.grid,
            "config_hash": self.config_hash,
            "l0": self.l0,
            "clipped_rows": self.clipped_rows,
            "options": dict(self.options),
        }
        if self.bootstrap is not None:
            out["bootstrap"] = self.bootstrap
        return out

    @classmethod
    def from_dict(cls, payload: Mapping) -> "FitResult":
        form = payload["form"]
        return cls(
            form=form,
            params=FormParams(form, payload["params"]),
            objective=float(payload.get("objective", math.nan)),
            restarts=tuple(
                RestartStat(bool(r["converged"]), float(r["objective"])) for r in payload.get("restarts", [])
            ),
            seed=int(payload.get("seed", 0)),
            grid=payload.get("grid", ""),
            config_hash=payload.get("config_hash", ""),
            l0=float(payload["l0"]),
            clipped_rows=int(payload.get("clipped_rows", 0)),
            options=payload.get("options", {}),
            bootstrap=payload.get("bootstrap"),
        )


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------


def huber(r, tau: float = HUBER_TAU):
    """Quadratic for ``|r| <= tau``, linear beyond; continuous and C1."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    out = np.where(a <= tau, 0.5 * r * r, tau * (a - 0.5 * tau))
    return float(out) if out.ndim == 0 else out


def huber_grad(r, tau: float = HUBER_TAU):
    r = np.asarray(r, dtype=float)
    return np.clip(r, -tau, tau)


def e_hinge_penalty(e: float, m: float, kappa: float = 1.5, lam: float = 1.0) -> float:
    """``lam * max(0, ln(m/kappa) - ln e)**2``; exactly zero when ``e >= m/kappa``."""
    if not (e > 0 and m > 0 and kappa > 1 and lam >= 0):
        raise ValueError("need e > 0, m > 0, kappa > 1, lambda >= 0")
    gap = math.log(m / kappa) - math.log(e)
    if gap <= 0:
        return 0.0
    return lam * gap * gap


class Objective:
    """Huber objective (plus optional hinge) on unconstrained coordinates."""

    def __init__(self, form: str, grid: Grid, config: FitConfig):
        self.form = form
        self.spec = config.spec(form)
        self.config = config
        self.l0 = grid.l0
        self.n, self.d, self.t = grid.n, grid.d, grid.t
        self.c = grid.c
        self.log_obs = np.log(grid.loss)
        self.hinge = config.e_hinge
        if self.hinge is not None:
            if not self.spec.wrapped:
                raise ConfigError(f"the E-hinge applies only to wrapper forms, not {form!r}")
            self.m = float(np.min(grid.loss))
            self.lam = self.hinge.lambda_per_row * len(grid)
            self.e_index = self.spec.names.index("e")

    def _valid(self, arr) -> bool:
        if self.spec.needs_l0 and "e" in self.spec.names:
            return bool(arr[self.spec.names.index("e")] < self.l0)
        return True

    def _hinge(self, x):
        if self.hinge is None:
            return 0.0, 0.0
        xe = x[self.e_index]
        log_e = float(np.log(softplus(xe)))
        gap = math.log(self.m / self.hinge.kappa) - log_e
        if gap <= 0:
            return 0.0, 0.0
        # d ln(softplus(x))/dx = sigmoid(x) / softplus(x)
        dlog = 1.0 / (1.0 + math.exp(-xe)) / math.exp(log_e)
        return self.lam * gap * gap, -2.0 * self.lam * gap * dlog

    def _as_array(self, params) -> np.ndarray:
        if isinstance(params, FormParams):
            return params.as_array()
        if isinstance(params, Mapping):
            return FormParams(self.form, dict(params)).as_array()
        return np.asarray(params, dtype=float)

    def residuals(self, params) -> np.ndarray:
        arr = self._as_array(params)
        pred = self.spec.log_predict(arr, self.n, self.d, self.t, self.c, self.l0)
        return np.real(pred) - self.log_obs

    def value(self, params) -> float:
        """Objective at constrained ``params`` (FormParams, mapping or array)."""
        arr = self._as_array(params)
        if not self._valid(arr):
            return math.inf
        r = self.residuals(arr)
        if not np.all(np.isfinite(r)):
            return math.inf
        total = float(np.sum(huber(r, self.config.huber_tau)))
        if self.hinge is not None:
            total += e_hinge_penalty(arr[self.e_index], self.m, self.hinge.kappa, self.lam)
        return total

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        bad = (math.inf, np.full(x.shape, np.nan))
        if not np.all(np.isfinite(x)):
            return bad
        arr = self.spec.from_unconstrained(x)
        if not self._valid(arr):
            return bad
        logp, jac = self.spec.log_predict_jac(x, self.n, self.d, self.t, self.c, self.l0)
        r = logp - self.log_obs
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(jac))):
            return bad
        tau = self.config.huber_tau
        f = float(np.sum(huber(r, tau)))
        g = jac.T @ huber_grad(r, tau)
        hv, hg = self._hinge(x)
        if hv:
            f += hv
            g = g.copy()
            g[self.e_index] += hg
        return f, g


def objective(form: str, params, grid: Grid, config: FitConfig | None = None) -> float:
    """Huber sum of log residuals plus the optional E-hinge."""
    config = config or FitConfig()
    fp = params if isinstance(params, FormParams) else FormParams(form, dict(params))
    val = Objective(form, grid, config).value(fp)
    if not math.isfinite(val):
        raise ValueError(f"{form}: non-finite prediction or e >= l0")
    return val


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _draw(rng: np.random.Generator, lo: float, hi: float, log: bool) -> float:
    if log:
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return float(rng.uniform(lo, hi))


def sample_init(
    form: str,
    rng: np.random.Generator,
    config: FitConfig | None = None,
    min_loss: float | None = None,
) -> FormParams:
    """Draw one random starting point for ``form``.

    ``min_loss`` (the grid's smallest observed loss) caps the floor draw so
    that a wrapper form never starts with ``e`` above the data.
    """
    config = config or FitConfig()
    spec = config.spec(form)
    if form == "farseer" and config.farseer_anchor is None:
        raise ConfigError("farseer fits need an anchor parameter vector (farseer_anchor)")
    e_lo, e_hi = E_RANGE
    if min_loss is not None and min_loss < e_hi:
        e_hi = min_loss
        e_lo = min(e_lo, 0.5 * e_hi)
    values = {}
    for name, role in zip(spec.names, spec.roles):
        override = config.init_ranges.get(name)
        if override is not None:
            lo, hi, *scale = override
            values[name] = _draw(rng, float(lo), float(hi), bool(scale and scale[0] == "log"))
        elif role == "floor":
            values[name] = _draw(rng, e_lo, e_hi, False)
        elif role == "exponent":
            values[name] = _draw(rng, *EXPONENT_RANGE, False)
        elif role == "coef":
            values[name] = _draw(rng, *COEF_RANGE, True)
        elif role == "break":
            values[name] = _draw(rng, *BREAK_RANGE, True)
        elif role == "drift":
            values[name] = _draw(rng, *DRIFT_RANGE, False)
        elif role == "anchor":
            a = float(config.farseer_anchor[name])
            values[name] = a * (1.0 + ANCHOR_JITTER * rng.uniform(-1.0, 1.0))
        else:
            raise AssertionError(role)
    return FormParams(form, values)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _run_restart(form: str, grid: Grid, config: FitConfig, index: int):
    rng = np.random.default_rng([config.seed, index])
    obj = Objective(form, grid, config)
    start = sample_init(form, rng, config, float(np.min(grid.loss)))
    x0 = obj.spec.to_unconstrained(start.values)
    res = bfgs(obj, x0, grad_tol=config.grad_tol, max_iters=config.max_iters)
    return res.x, RestartStat(bool(res.converged), float(res.fun), int(res.n_iter))


def resolve_workers(config: FitConfig) -> int:
    if config.workers is not None:
        return max(1, int(config.workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def _finish(form, grid, config, spec, xs, stats) -> FitResult:
    best = None
    for i, st in enumerate(stats):
        if st.converged and math.isfinite(st.objective) and (best is None or st.objective < stats[best].objective):
            best = i
    if best is None:
        raise FitError(f"{form}: none of {len(stats)} restarts converged", stats)
    arr = spec.from_unconstrained(xs[best])
    params = FormParams(form, dict(zip(spec.names, map(float, arr))))
    return FitResult(
        form=form,
        params=params,
        objective=Objective(form, grid, config).value(params),
        restarts=tuple(stats),
        seed=config.seed,
        grid=grid.name,
        config_hash=config_hash(form, config),
        l0=grid.l0,
        clipped_rows=grid.clipped_rows,
        options={"m4_axis": config.m4_axis, "bnsl_scalar": config.bnsl_scalar, "k": config.k},
    )


def fit(form: str, grid: Grid, config: FitConfig | None = None) -> FitResult:
    """Best-of-restarts fit; non-converged restarts are discarded."""
    config = config or FitConfig()
    spec = config.spec(form)
    Objective(form, grid, config)  # validates hinge / form combination early
    if form == "farseer" and config.farseer_anchor is None:
        raise ConfigError("farseer fits need an anchor parameter vector (farseer_anchor)")
    n = config.n_restarts(form)
    workers = resolve_workers(config)
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_restart, [form] * n, [grid] * n, [config] * n, range(n)))
    else:
        out = [_run_restart(form, grid, config, i) for i in range(n)]
    xs = [x for x, _ in out]
    stats = [s for _, s in out]
    return _finish(form, grid, config, spec, xs, stats)


def warm_refit(form: str, grid: Grid, start, config: FitConfig | None = None) -> FitResult:
    """Single minimization from ``start`` (a FormParams or mapping)."""
    config = config or FitConfig()
    spec = config.spec(form)
    start_fp = start if isinstance(start, FormParams) else FormParams(form, dict(start))
    x0 = spec.to_unconstrained(start_fp.values)
    obj = Objective(form, grid, config)
    res = bfgs(obj, x0, grad_tol=config.grad_tol, max_iters=config.max_iters)
    stat = RestartStat(bool(res.converged), float(res.fun), int(res.n_iter))
    return _finish(form, grid, config, spec, [res.x], [stat])
