"""Registry of parametric scaling-law forms.

Every form is evaluated in log space: ``log_predict`` returns ``ln L`` for a
parameter vector and arrays of ``(n, d, t, c)``.  All evaluation code is
written with operations that stay valid for complex arguments, so the
Jacobian with respect to the unconstrained parameters can be taken by the
complex-step method (exact to rounding) for every form.

Parameter transforms:

* ``pos``   -- strictly positive, mapped by the natural log
* ``floor`` -- non-negative floor such as ``E``, mapped by inverse softplus
* ``free``  -- sign-free, mapped by the identity
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

FORM_IDS = (
    "ours",
    "ours-no-wrapper",
    "ours-no-overfit",
    "ours-exp-wrapper",
    "ours-single-exp",
    "ours-extended",
    "chinchilla",
    "kaplan",
    "muennighoff",
    "m4",
    "bnsl-k1",
    "bnsl-k2",
    "farseer",
)

WrapperKind = Literal["rational", "exponential"]

E_FLOOR = 1e-12
# lets exp() of a log-difficulty saturate instead of overflowing
_LOG_H_CAP = 700.0
BETA_EFF_BOUNDS = (0.01, 5.0)
# Chinchilla tokens-per-parameter, sets Muennighoff's base capacity U_N
TOKENS_PER_PARAM = 20.0
DEFAULT_K = 6.0


class InvalidParametersError(ValueError):
    """Parameters violate a form's validity invariants."""


class OutOfRangeError(ValueError):
    """A loss lies outside the open interval ``(e, l0)``."""

    def __init__(self, message: str, bound: str):
        super().__init__(message)
        self.bound = bound


class OverflowWarning(RuntimeWarning):
    """Difficulty saturated at an extreme coordinate."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Point:
    """One ``(n, d, t)`` coordinate, optionally with measured compute ``c``."""

    n: float
    d: float
    t: float
    c: float | None = None

    def __post_init__(self):
        for name in ("n", "d", "t"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"point coordinate {name}={v!r} must be finite and > 0")
        if self.c is not None and not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"point compute c={self.c!r} must be finite and > 0")


@dataclass(frozen=True)
class OursParams:
    """Parameters of the saturating three-term law."""

    e: float
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float
    delta: float

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not math.isfinite(v) or v < 0:
                raise InvalidParametersError(f"{name}={v!r} must be finite and >= 0")

    def as_dict(self) -> dict[str, float]:
        return {
            "e": self.e,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "delta": self.delta,
        }

    def to_form_params(self, form: str = "ours") -> "FormParams":
        spec = get_form(form)
        values = self.as_dict()
        return FormParams(form, {k: values[k] for k in spec.names})

    @classmethod
    def from_mapping(cls, values: Mapping[str, float]) -> "OursParams":
        return cls(
            e=float(values["e"]),
            a=float(values["a"]),
            b=float(values["b"]),
            c=float(values.get("c", 0.0)),
            alpha=float(values["alpha"]),
            beta=float(values["beta"]),
            gamma=float(values.get("gamma", 0.0)),
            delta=float(values.get("delta", 0.0)),
        )


@dataclass(frozen=True)
class FormParams:
    """A named parameter vector for one registered form."""

    form: str
    values: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        spec = get_form(self.form)
        missing = [n for n in spec.names if n not in self.values]
        extra = [n for n in self.values if n not in spec.names]
        if missing or extra:
            raise InvalidParametersError(
                f"{self.form}: missing parameters {missing}, unexpected {extra}"
            )
        object.__setattr__(self, "values", {n: float(self.values[n]) for n in spec.names})
        spec.validate(self.values)

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def as_array(self) -> np.ndarray:
        return np.array([self.values[n] for n in get_form(self.form).names])

    @classmethod
    def from_array(cls, form: str, arr: Sequence[float]) -> "FormParams":
        names = get_form(form).names
        return cls(form, dict(zip(names, (float(v) for v in arr))))


# ---------------------------------------------------------------------------
# Complex-safe numerical helpers
# ---------------------------------------------------------------------------


def _real(x):
    return np.real(x)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def softplus(x):
    """``ln(1 + e^x)`` without overflow; valid for complex ``x``."""
    x = np.asarray(x)
    pos = _real(x) > 0
    safe_pos = np.where(pos, x, 0.0)
    safe_neg = np.where(pos, 0.0, x)
    return np.where(pos, safe_pos + np.log1p(np.exp(-safe_pos)), np.log1p(np.exp(safe_neg)))


def inv_softplus(y):
    """Inverse of :func:`softplus` for ``y > 0``."""
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _logsumexp(terms: Sequence) -> np.ndarray:
    """Log of a sum of exponentials, stable and complex-safe.

    Terms equal to ``-inf`` contribute zero.  An all ``-inf`` stack returns
    ``-inf``.
    """
    stack = np.stack(np.broadcast_arrays(*terms))
    m = np.max(_real(stack), axis=0)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        s = np.sum(np.exp(stack - m_safe), axis=0)
        out = m_safe + _log(s)
    return np.where(np.isneginf(m), -np.inf, np.where(np.isposinf(m), np.inf, out))


def _cap_log_h(log_h):
    capped = np.where(_real(log_h) > _LOG_H_CAP, _LOG_H_CAP, log_h)
    return capped


def _wrap_log(log_h, e, l0, kind: WrapperKind):
    """``ln(e + (l0 - e) w(h))`` given ``ln h``."""
    log_h = np.where(np.isneginf(_real(log_h)), -1e300, log_h)
    if kind == "rational":
        # w = h/(1+h) = exp(-softplus(-ln h))
        w = np.exp(-softplus(-log_h))
    elif kind == "exponential":
        w = -np.expm1(-np.exp(_cap_log_h(log_h)))
    else:
        raise ValueError(f"unknown wrapper kind {kind!r}")
    return _log(e + (l0 - e) * w)


# ---------------------------------------------------------------------------
# Public scalar operations
# ---------------------------------------------------------------------------


def log_difficulty(params: OursParams, n, d, t):
    """``ln h`` for the three-term difficulty, vectorized over coordinates."""
    ln_n, ln_d, ln_t = _log(np.asarray(n, float)), _log(np.asarray(d, float)), _log(np.asarray(t, float))
    return _logsumexp(
        [
            _log(params.a) - params.alpha * ln_n,
            _log(params.b) - params.beta * ln_t,
            _log(params.c) + params.gamma * ln_n - params.delta * ln_d,
        ]
    )


def difficulty(params: OursParams, pt: Point) -> float:
    """Undercapacity + undertraining + overfitting difficulty at ``pt``.

    Terms are accumulated in log space; a result beyond double range is
    returned as ``inf`` with an :class:`OverflowWarning` rather than NaN.
    """
    log_h = float(log_difficulty(params, pt.n, pt.d, pt.t))
    if log_h > 709.0:
        warnings.warn(f"difficulty saturated (ln h = {log_h:.1f})", OverflowWarning, stacklevel=2)
        return math.inf
    return math.exp(log_h)


def _check_e_l0(e: float, l0: float):
    if not (math.isfinite(e) and math.isfinite(l0)) or e < 0 or e >= l0:
        raise InvalidParametersError(f"need 0 <= e < l0, got e={e!r}, l0={l0!r}")


def wrap(h: float, e: float, l0: float, kind: WrapperKind = "rational") -> float:
    """Map a difficulty ``h >= 0`` to a loss in ``[e, l0)``."""
    _check_e_l0(e, l0)
    if not h >= 0:
        raise ValueError(f"difficulty must be >= 0, got {h!r}")
    if kind == "rational":
        w = h / (1.0 + h) if math.isfinite(h) else 1.0
    elif kind == "exponential":
        w = -math.expm1(-h)
    else:
        raise ValueError(f"unknown wrapper kind {kind!r}")
    return e + (l0 - e) * w


def invert_wrapper(loss: float, e: float, l0: float, kind: WrapperKind = "rational") -> float:
    """Difficulty that :func:`wrap` maps to ``loss``."""
    _check_e_l0(e, l0)
    if loss <= e:
        raise OutOfRangeError(f"loss {loss!r} is at or below the floor e={e!r}", bound="lower")
    if loss >= l0:
        raise OutOfRangeError(f"loss {loss!r} is at or above the baseline l0={l0!r}", bound="upper")
    if kind == "rational":
        return (loss - e) / (l0 - loss)
    if kind == "exponential":
        return -math.log((l0 - loss) / (l0 - e))
    raise ValueError(f"unknown wrapper kind {kind!r}")


# ---------------------------------------------------------------------------
# Form evaluators: (theta, n, d, t, c, l0) -> ln L
# ---------------------------------------------------------------------------


def _ours_family(kind: WrapperKind | None, overfit: str | None):
    def log_predict(th, n, d, t, c, l0):
        ln_n, ln_d, ln_t = _log(n), _log(d), _log(t)
        terms = [_log(th["a"]) - th["alpha"] * ln_n, _log(th["b"]) - th["beta"] * ln_t]
        if overfit == "two":
            terms.append(_log(th["c"]) + th["gamma"] * ln_n - th["delta"] * ln_d)
        elif overfit == "single":
            terms.append(_log(th["c"]) + th["gamma"] * (ln_n - ln_d))
        log_h = _logsumexp(terms)
        if kind is None:
            return _logsumexp([_log(th["e"]), _log(l0 - th["e"]) + log_h])
        return _wrap_log(log_h, th["e"], l0, kind)

    return log_predict


def _extended(th, n, d, t, c, l0):
    ln_n, ln_d, ln_t = _log(n), _log(d), _log(t)
    beta_eff = th["beta0"] + th["beta_n"] * ln_n + th["beta_d"] * ln_d
    lo, hi = BETA_EFF_BOUNDS
    beta_eff = np.where(_real(beta_eff) < lo, lo, np.where(_real(beta_eff) > hi, hi, beta_eff))
    log_h = _logsumexp(
        [
            _log(th["a"]) - th["alpha"] * ln_n,
            _log(th["b"]) - beta_eff * ln_t,
            _log(th["c"]) + th["gamma"] * ln_n - th["delta"] * ln_d,
            _log(th["e2"]) + th["phi"] * (ln_n - ln_d),
        ]
    )
    return _wrap_log(log_h, th["e"], l0, "exponential")


def _chinchilla(th, n, d, t, c, l0):
    return _logsumexp(
        [_log(th["e"]), _log(th["A"]) - th["alpha"] * _log(n), _log(th["B"]) - th["beta"] * _log(d)]
    )


def _kaplan(th, n, d, t, c, l0):
    inner = _logsumexp(
        [
            (th["alpha_n"] / th["alpha_d"]) * (_log(th["n_c"]) - _log(n)),
            _log(th["d_c"]) - _log(d),
        ]
    )
    return th["alpha_d"] * inner


def _saturating(base, excess, r_star):
    """``base * (1 + r*(1 - exp(-excess/r*)))``."""
    return base * (1.0 + r_star * (-np.expm1(-excess / r_star)))


def _muennighoff(th, n, d, t, c, l0):
    reps = t / d - 1.0
    reps = np.where(_real(reps) < 0, 0.0, reps)
    d_eff = _saturating(d, reps, th["r_d_star"])
    base_n = d / TOKENS_PER_PARAM
    u_n = np.where(_real(n) < _real(base_n), n, base_n)
    excess_n = n / u_n - 1.0
    n_eff = _saturating(u_n, excess_n, th["r_n_star"])
    return _logsumexp(
        [
            _log(th["e"]),
            _log(th["A"]) - th["alpha"] * _log(n_eff),
            _log(th["B"]) - th["beta"] * _log(d_eff),
        ]
    )


def _compute(n, t, c, k):
    if c is None:
        return k * n * t
    c = np.asarray(c, dtype=float)
    return np.where(np.isfinite(c) & (c > 0), c, k * n * t)


def _m4_residual(s, th, log_x, l0):
    """M4 relation in terms of ``s = (L - e)/(l0 - e)``; increasing in ``s``."""
    span = l0 - th["e"]
    return (
        _log(s)
        + _log(span)
        - th["a_m4"] * (_log(1.0 - s) + _log(span))
        - _log(th["b_m4"])
        + th["c_m4"] * log_x
    )


def _m4_solve(th, log_x, l0, tol=1e-10):
    """Bisection for ``s`` on real parts, then one Newton step in full precision.

    The Newton step carries the implicit-function derivative when ``th`` is
    complex.
    """
    th_r = {k: _real(v) for k, v in th.items()}
    log_x_r = _real(log_x)
    shape = np.broadcast(log_x_r, *th_r.values()).shape
    lo = np.zeros(shape)
    hi = np.ones(shape)
    span = _real(l0 - th_r["e"])
    # interval width in loss units halves each step
    n_steps = int(np.ceil(np.log2(max(float(np.max(span)), 1e-300) / tol))) + 8
    for _ in range(max(n_steps, 60)):
        mid = 0.5 * (lo + hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = _m4_residual(mid, th_r, log_x_r, l0)
        up = f > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    s = 0.5 * (lo + hi)
    if not np.all(np.isfinite(s)):
        raise RuntimeError("M4 bisection failed to bracket")
    f = _m4_residual(s, th, log_x, l0)
    df = 1.0 / s + th_r["a_m4"] / (1.0 - s)
    s_new = s - f / df
    # keep the polished value inside (0, 1); fall back to bisection midpoint
    ok = (_real(s_new) > 0) & (_real(s_new) < 1)
    return np.where(ok, s_new, s)


def _make_m4(axis: str, k: float):
    def log_predict(th, n, d, t, c, l0):
        if axis == "n":
            x = n
        elif axis == "d":
            x = d
        else:
            x = _compute(n, t, c, k)
        s = _m4_solve(th, _log(x), l0)
        return _log(th["e"] + (l0 - th["e"]) * s)

    return log_predict


def _make_bnsl(n_breaks: int, scalar: str, k: float):
    def log_predict(th, n, d, t, c, l0):
        if scalar == "compute":
            x = _compute(n, t, c, k)
        elif scalar == "knt":
            x = k * n * t
        elif scalar == "n":
            x = n
        elif scalar == "d":
            x = d
        else:
            x = t
        ln_x = _log(x)
        curve = _log(th["b_bnsl"]) - th["c0"] * ln_x
        for i in range(1, n_breaks + 1):
            f_i = th[f"f{i}"]
            curve = curve - th[f"c{i}"] * f_i * softplus((ln_x - _log(th[f"d{i}"])) / f_i)
        return _logsumexp([_log(th["a_bnsl"]), curve])

    return log_predict


def _farseer(th, n, d, t, c, l0):
    ln_n, ln_t = _log(n), _log(t)
    floor = th["a1"] * np.exp(th["a2"] * ln_n) + th["a3"]
    coef = th["b1"] * np.exp(th["b2"] * ln_n) + th["b3"]
    expo = np.exp(th["c1"] * np.exp(th["c2"] * ln_n) + th["c3"])
    return _logsumexp([floor, coef - expo * ln_t])


# ---------------------------------------------------------------------------
# Form specifications
# ---------------------------------------------------------------------------

# init roles: floor ~ U(0.5, 3); exponent ~ U(0.1, 0.7); coef ~ logU[0.01, 1000];
# break ~ logU[10, 1e6]; drift ~ U(-0.02, 0.02); anchor = jittered caller value


@dataclass(frozen=True)
class FormSpec:
    """Parameter layout and evaluation rule of one form."""

    id: str
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    roles: tuple[str, ...]
    log_predict_fn: Callable = field(repr=False, compare=False)
    wrapped: bool = False
    needs_l0: bool = False
    data_axis: str = "t"

    @property
    def n_params(self) -> int:
        return len(self.names)

    def validate(self, values: Mapping[str, float], l0: float | None = None):
        for name, kind in zip(self.names, self.kinds):
            v = values[name]
            if not math.isfinite(v):
                raise InvalidParametersError(f"{self.id}: {name}={v!r} is not finite")
            if kind in ("pos", "floor") and v < 0:
                raise InvalidParametersError(f"{self.id}: {name}={v!r} must be >= 0")
        if l0 is not None and self.needs_l0 and "e" in values and values["e"] >= l0:
            raise InvalidParametersError(f"{self.id}: e={values['e']!r} must be < l0={l0!r}")

    # -- transforms -------------------------------------------------------
    def to_unconstrained(self, values) -> np.ndarray:
        arr = np.asarray(
            [values[n] for n in self.names] if isinstance(values, Mapping) else values, dtype=float
        )
        if arr.shape != (self.n_params,) or not np.all(np.isfinite(arr)):
            raise ValueError(f"{self.id}: non-finite or mis-shaped parameter vector {arr!r}")
        out = np.empty_like(arr)
        for i, kind in enumerate(self.kinds):
            if kind == "pos":
                if arr[i] <= 0:
                    raise InvalidParametersError(f"{self.id}: {self.names[i]} must be > 0 for log transform")
                out[i] = math.log(arr[i])
            elif kind == "floor":
                out[i] = float(inv_softplus(max(arr[i], E_FLOOR)))
            else:
                out[i] = arr[i]
        return out

    def from_unconstrained(self, x, *, check: bool = True):
        """Map an unconstrained vector back to natural parameters.

        Returns a plain array; complex input yields complex output (used for
        complex-step derivatives).
        """
        x = np.asarray(x)
        if check and (x.shape[-1] != self.n_params or not np.all(np.isfinite(x))):
            raise ValueError(f"{self.id}: non-finite or mis-shaped unconstrained vector")
        cols = []
        for i, kind in enumerate(self.kinds):
            xi = x[..., i]
            if kind == "pos":
                with np.errstate(over="ignore"):
                    cols.append(np.exp(xi))
            elif kind == "floor":
                cols.append(softplus(xi))
            else:
                cols.append(xi)
        return np.stack(cols, axis=-1)

    # -- evaluation -------------------------------------------------------
    def theta(self, arr) -> dict:
        arr = np.asarray(arr)
        return {name: arr[..., i] for i, name in enumerate(self.names)}

    def log_predict(self, arr, n, d, t, c=None, l0: float | None = None):
        if self.needs_l0 and l0 is None:
            raise ValueError(f"{self.id} needs l0")
        th = self.theta(arr)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self.log_predict_fn(th, n, d, t, c, l0)

    def log_predict_jac(self, x, n, d, t, c=None, l0: float | None = None, step: float = 1e-30):
        """``ln L`` and its Jacobian wrt unconstrained ``x`` (complex step)."""
        x = np.asarray(x, dtype=float)
        p = self.n_params
        xc = np.tile(x.astype(complex), (p + 1, 1))
        xc[1:][np.arange(p), np.arange(p)] += 1j * step
        arr = self.from_unconstrained(xc, check=False)
        th_arr = arr[:, None, :]
        out = self.log_predict(th_arr, n, d, t, c, l0)
        out = np.broadcast_to(out, (p + 1,) + np.broadcast(n, d, t).shape)
        value = np.real(out[0])
        jac = np.imag(out[1:]).T / step
        return value, jac


def _kinds_roles(layout):
    names = tuple(n for n, _, _ in layout)
    kinds = tuple(k for _, k, _ in layout)
    roles = tuple(r for _, _, r in layout)
    return names, kinds, roles


_OURS_LAYOUT = [
    ("e", "floor", "floor"),
    ("a", "pos", "coef"),
    ("b", "pos", "coef"),
    ("c", "pos", "coef"),
    ("alpha", "pos", "exponent"),
    ("beta", "pos", "exponent"),
    ("gamma", "pos", "exponent"),
    ("delta", "pos", "exponent"),
]


def _drop(layout, *names):
    return [row for row in layout if row[0] not in names]


@lru_cache(maxsize=None)
def get_form(form_id: str, m4_axis: str = "d", bnsl_scalar: str = "compute", k: float = DEFAULT_K) -> FormSpec:
    """Look up a form by id.

    ``m4_axis`` selects the M4 input scalar (``n``, ``d`` or ``c``);
    ``bnsl_scalar`` selects BNSL's composite scalar (``compute`` = record c
    when present else ``k*n*t``).
    """
    if form_id == "ours":
        layout, fn = _OURS_LAYOUT, _ours_family("rational", "two")
        return FormSpec(form_id, *_kinds_roles(layout), fn, wrapped=True, needs_l0=True)
    if form_id == "ours-no-wrapper":
        return FormSpec(form_id, *_kinds_roles(_OURS_LAYOUT), _ours_family(None, "two"), needs_l0=True)
    if form_id == "ours-no-overfit":
        layout = _drop(_OURS_LAYOUT, "c", "gamma", "delta")
        return FormSpec(form_id, *_kinds_roles(layout), _ours_family("rational", None), wrapped=True, needs_l0=True)
    if form_id == "ours-exp-wrapper":
        return FormSpec(
            form_id, *_kinds_roles(_OURS_LAYOUT), _ours_family("exponential", "two"), wrapped=True, needs_l0=True
        )
    if form_id == "ours-single-exp":
        layout = _drop(_OURS_LAYOUT, "delta")
        return FormSpec(form_id, *_kinds_roles(layout), _ours_family("rational", "single"), wrapped=True, needs_l0=True)
    if form_id == "ours-extended":
        layout = [
            ("e", "floor", "floor"),
            ("a", "pos", "coef"),
            ("alpha", "pos", "exponent"),
            ("b", "pos", "coef"),
            ("beta0", "free", "exponent"),
            ("beta_n", "free", "drift"),
            ("beta_d", "free", "drift"),
            ("c", "pos", "coef"),
            ("gamma", "pos", "exponent"),
            ("delta", "pos", "exponent"),
            ("e2", "pos", "coef"),
            ("phi", "pos", "exponent"),
        ]
        return FormSpec(form_id, *_kinds_roles(layout), _extended, wrapped=True, needs_l0=True)
    if form_id == "chinchilla":
        layout = [
            ("e", "floor", "floor"),
            ("A", "pos", "coef"),
            ("B", "pos", "coef"),
            ("alpha", "pos", "exponent"),
            ("beta", "pos", "exponent"),
        ]
        return FormSpec(form_id, *_kinds_roles(layout), _chinchilla, data_axis="d")
    if form_id == "kaplan":
        layout = [
            ("n_c", "pos", "coef"),
            ("d_c", "pos", "coef"),
            ("alpha_n", "pos", "exponent"),
            ("alpha_d", "pos", "exponent"),
        ]
        return FormSpec(form_id, *_kinds_roles(layout), _kaplan, data_axis="d")
    if form_id == "muennighoff":
        layout = [
            ("e", "floor", "floor"),
            ("A", "pos", "coef"),
            ("B", "pos", "coef"),
            ("alpha", "pos", "exponent"),
            ("beta", "pos", "exponent"),
            ("r_d_star", "pos", "coef"),
            ("r_n_star", "pos", "coef"),
        ]
        return FormSpec(form_id, *_kinds_roles(layout), _muennighoff)
    if form_id == "m4":
        if m4_axis not in ("n", "d", "c"):
            raise ValueError(f"m4 axis must be one of n, d, c; got {m4_axis!r}")
        layout = [
            ("e", "floor", "floor"),
            ("a_m4", "pos", "exponent"),
            ("b_m4", "pos", "coef"),
            ("c_m4", "pos", "exponent"),
        ]
        return FormSpec(form_id, *_kinds_roles(layout), _make_m4(m4_axis, k), needs_l0=True, data_axis=m4_axis)
    if form_id in ("bnsl-k1", "bnsl-k2"):
        n_breaks = int(form_id[-1])
        layout = [("a_bnsl", "floor", "floor"), ("b_bnsl", "pos", "coef"), ("c0", "pos", "exponent")]
        for i in range(1, n_breaks + 1):
            layout += [(f"d{i}", "pos", "break"), (f"c{i}", "pos", "exponent"), (f"f{i}", "pos", "exponent")]
        return FormSpec(form_id, *_kinds_roles(layout), _make_bnsl(n_breaks, bnsl_scalar, k))
    if form_id == "farseer":
        layout = [(f"{g}{i}", "free", "anchor") for g in "abc" for i in (1, 2, 3)]
        return FormSpec(form_id, *_kinds_roles(layout), _farseer)
    raise KeyError(f"unknown form {form_id!r}; valid ids: {', '.join(FORM_IDS)}")


def is_wrapper_form(form_id: str) -> bool:
    return get_form(form_id).wrapped


# ---------------------------------------------------------------------------
# Convenience entry points
# ---------------------------------------------------------------------------


def _as_form_params(form: str, params) -> FormParams:
    if isinstance(params, FormParams):
        if params.form != form:
            raise InvalidParametersError(f"parameters are for {params.form!r}, not {form!r}")
        return params
    if isinstance(params, OursParams):
        return params.to_form_params(form)
    return FormParams(form, dict(params))


def predict(form: str, params, pt: Point, l0: float | None = None, **form_options) -> float:
    """Predicted loss of ``form`` at a single point."""
    fp = _as_form_params(form, params)
    spec = get_form(form, **form_options)
    spec.validate(fp.values, l0)
    out = spec.log_predict(fp.as_array(), np.float64(pt.n), np.float64(pt.d), np.float64(pt.t), pt.c, l0)
    return float(np.exp(out))


def predict_many(form: str, params, n, d, t, c=None, l0: float | None = None, **form_options) -> np.ndarray:
    """Vectorized :func:`predict` over coordinate arrays."""
    fp = _as_form_params(form, params)
    spec = get_form(form, **form_options)
    spec.validate(fp.values, l0)
    n, d, t = (np.asarray(v, dtype=float) for v in (n, d, t))
    return np.exp(spec.log_predict(fp.as_array(), n, d, t, c, l0))


def solve_m4(params, x: float, l0: float) -> float:
    """Unique ``L`` in ``(e, l0)`` with ``(L-e)/(l0-L)^a = b x^-c``."""
    fp = _as_form_params("m4", params)
    spec = get_form("m4")
    spec.validate(fp.values, l0)
    e = fp["e"]
    if not (e < l0) or min(fp["a_m4"], fp["b_m4"], fp["c_m4"]) < 0:
        raise InvalidParametersError("m4 needs e < l0 and non-negative coefficients")
    th = spec.theta(fp.as_array())
    s = _m4_solve(th, np.log(float(x)), l0)
    return float(e + (l0 - e) * s)


def to_unconstrained(form: str, params) -> np.ndarray:
    fp = _as_form_params(form, params)
    return get_form(form).to_unconstrained(fp.values)


def from_unconstrained(form: str, vector) -> FormParams:
    spec = get_form(form)
    arr = spec.from_unconstrained(np.asarray(vector, dtype=float))
    return FormParams.from_array(form, arr)
