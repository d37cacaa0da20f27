"""Holdout splits, log-space metrics, bootstrap intervals and evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fit import FitConfig, FitError, FitResult, fit, resolve_workers, warm_refit
from .gridio import ConfigError, Grid

AXES = ("c", "d", "n", "t")
BOOTSTRAP_QUANTILES = (2.5, 97.5)


class SplitError(ValueError):
    """A split cannot be formed on this grid."""


@dataclass(frozen=True)
class SplitSpec:
    """One evaluation protocol."""

    kind: str
    axis: str | None = None
    fraction: float = 0.10
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("high-axis", "kfold", "in-sample"):
            raise ConfigError(f"unknown split kind {self.kind!r}")
        if self.kind == "high-axis" and self.axis not in AXES:
            raise ConfigError(f"high-axis split needs axis in {AXES}, got {self.axis!r}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction!r}")

    @property
    def label(self) -> str:
        if self.kind == "high-axis":
            return f"high-{self.axis}"
        if self.kind == "kfold":
            return f"kfold{self.k}"
        return "in-sample"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SplitSpec":
        """Parse ``high-c``, ``high-d:0.2``, ``kfold``, ``kfold:10`` or ``in-sample``."""
        name, _, arg = text.strip().partition(":")
        if name.startswith("high-"):
            return cls("high-axis", axis=name[5:], fraction=float(arg) if arg else 0.10, seed=seed)
        if name == "kfold":
            return cls("kfold", k=int(arg) if arg else 5, seed=seed)
        if name == "in-sample":
            return cls("in-sample", seed=seed)
        raise ConfigError(f"unknown protocol {text!r}; use high-<c|d|n|t>, kfold[:k] or in-sample")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def axis_values(grid: Grid, axis: str, k: float = 6.0) -> np.ndarray:
    if axis == "c":
        return grid.compute(k)
    if axis in ("n", "d", "t"):
        return grid.column(axis)
    raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")


def split_high_axis_indices(grid: Grid, axis: str, fraction: float = 0.10, k: float = 6.0):
    """Index form of :func:`split_high_axis`."""
    vals = axis_values(grid, axis, k)
    groups = np.unique(vals)[::-1]
    if groups.size < 2:
        raise SplitError(f"need at least two distinct {axis} groups, found {groups.size}")
    target = fraction * len(grid)
    held = np.zeros(len(grid), dtype=bool)
    for g in groups:
        held |= vals == g
        if held.sum() >= target:
            break
    if held.all():
        raise SplitError(f"holdout fraction {fraction} leaves no training rows")
    return np.flatnonzero(~held), np.flatnonzero(held)


def split_high_axis(grid: Grid, axis: str, fraction: float = 0.10, k: float = 6.0) -> tuple[Grid, Grid]:
    """Hold out the highest-``axis`` groups until they reach ``fraction`` of rows.

    Groups are never split; the group that crosses the threshold is held out
    in full, so the holdout may exceed ``fraction``.
    """
    train, hold = split_high_axis_indices(grid, axis, fraction, k)
    return grid.subset(train, f"{grid.name}:train"), grid.subset(hold, f"{grid.name}:holdout")


def split_kfold_indices(n_rows: int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if n_rows < k:
        raise SplitError(f"need at least k={k} rows, got {n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    folds = np.array_split(perm, k)
    out = []
    for i, hold in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(hold)))
    return out


def split_kfold(grid: Grid, k: int = 5, seed: int = 0) -> list[tuple[Grid, Grid]]:
    """Uniform-random partition into ``k`` near-equal folds."""
    return [
        (grid.subset(tr, f"{grid.name}:train{i}"), grid.subset(ho, f"{grid.name}:fold{i}"))
        for i, (tr, ho) in enumerate(split_kfold_indices(len(grid), k, seed))
    ]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _log_residuals(preds, obs) -> np.ndarray:
    p = np.asarray(preds, dtype=float)
    o = np.asarray(obs, dtype=float)
    if p.shape != o.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {o.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one pair")
    if np.any(p <= 0) or np.any(o <= 0):
        raise ValueError("predictions and observations must be positive")
    return np.log(p) - np.log(o)


def rmse_log(preds, obs) -> float:
    r = _log_residuals(preds, obs)
    return float(np.sqrt(np.mean(r * r)))


def mbe_log(preds, obs) -> float:
    return float(np.mean(_log_residuals(preds, obs)))


def predict_grid(result: FitResult, grid: Grid) -> np.ndarray:
    from .forms import get_form

    spec = get_form(result.form, **_form_options(result))
    arr = result.params.as_array()
    return np.exp(np.real(spec.log_predict(arr, grid.n, grid.d, grid.t, grid.c, result.l0)))


def _form_options(result: FitResult) -> dict:
    opts = result.options or {}
    return {
        "m4_axis": opts.get("m4_axis", "d"),
        "bnsl_scalar": opts.get("bnsl_scalar", "compute"),
        "k": float(opts.get("k", 6.0)),
    }


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def _summary(samples: np.ndarray) -> dict:
    lo, hi = np.percentile(samples, BOOTSTRAP_QUANTILES)
    return {"std": float(np.std(samples)), "q2.5": float(lo), "q97.5": float(hi)}


def _boot_one(form, grid, point_values, config, seed, index):
    rng = np.random.default_rng([seed, index])
    idx = rng.integers(0, len(grid), size=len(grid))
    sample = grid.subset(np.sort(idx))
    try:
        res = warm_refit(form, sample, point_values, config)
    except (FitError, ValueError):
        return None
    return res


def bootstrap(
    form: str,
    grid: Grid,
    config: FitConfig | None = None,
    b: int = 200,
    point: FitResult | None = None,
    holdout: Grid | None = None,
    seed: int | None = None,
) -> dict:
    """Row-resampling bootstrap around a point estimate.

    Every resample of the training rows is refit from ``point`` (fitted here
    when not given).  Returns ``{"params": {name: summary}, "metrics":
    {name: summary}, "b": b, "failed": count}`` where each summary holds
    ``std``, ``q2.5`` and ``q97.5``.  Metrics are the holdout ``rmse_log``
    and ``mbe_log`` when a holdout grid is supplied.
    """
    config = config or FitConfig()
    if b < 1:
        raise ConfigError(f"bootstrap size must be >= 1, got {b}")
    point = point or fit(form, grid, config)
    seed = config.seed if seed is None else seed
    start = dict(point.params.values)
    workers = resolve_workers(config)
    if workers > 1 and b > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(_boot_one, *zip(*[(form, grid, start, config, seed, i) for i in range(b)])))
    else:
        fits = [_boot_one(form, grid, start, config, seed, i) for i in range(b)]
    ok = [f for f in fits if f is not None]
    failed = b - len(ok)
    if failed > b / 2:
        raise FitError(f"{form}: {failed} of {b} bootstrap refits failed")
    names = point.params.values.keys()
    params = {n: _summary(np.array([f.params[n] for f in ok])) for n in names}
    metrics = {}
    if holdout is not None:
        obs = holdout.loss
        preds = [predict_grid(f, holdout) for f in ok]
        metrics["rmse_log"] = _summary(np.array([rmse_log(p, obs) for p in preds]))
        metrics["mbe_log"] = _summary(np.array([mbe_log(p, obs) for p in preds]))
    return {"b": b, "failed": failed, "params": params, "metrics": metrics}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Residual:
    fold: int
    n: float
    d: float
    t: float
    observed: float
    predicted: float

    @property
    def log_residual(self) -> float:
        return math.log(self.predicted) - math.log(self.observed)


@dataclass(frozen=True)
class EvalCell:
    """Scores of one form under one protocol.

    ``boot_std`` is the bootstrap std of the holdout ``rmse_log`` when a
    bootstrap was requested; for k-fold protocols it is the across-fold std.
    """

    form: str
    protocol: str
    rmse_log: float = math.nan
    mbe_log: float = math.nan
    n_holdout: int = 0
    boot_std: float | None = None
    failed: bool = False
    error: str | None = None
    residuals: tuple[Residual, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class EvalReport:
    cells: tuple[EvalCell, ...] = ()

    COLUMNS = ("form", "protocol", "rmse_log", "mbe_log", "n_holdout", "boot_std")

    def __len__(self) -> int:
        return len(self.cells)

    def to_rows(self) -> list[dict]:
        rows = []
        for c in self.cells:
            rows.append(
                {
                    "form": c.form,
                    "protocol": c.protocol,
                    "rmse_log": c.rmse_log,
                    "mbe_log": c.mbe_log,
                    "n_holdout": c.n_holdout,
                    "boot_std": c.boot_std,
                }
            )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.to_rows():
            w.writerow([_fmt(row[k]) for k in self.COLUMNS])
        return buf.getvalue()

    def residuals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["form", "protocol", "fold", "n", "d", "t", "observed", "predicted", "log_residual"])
        for c in self.cells:
            for r in c.residuals:
                w.writerow(
                    [c.form, c.protocol, r.fold]
                    + [_fmt(v) for v in (r.n, r.d, r.t, r.observed, r.predicted, r.log_residual)]
                )
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = []
        for c, row in zip(self.cells, self.to_rows()):
            row = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}
            row["failed"] = c.failed
            if c.error:
                row["error"] = c.error
            out.append(row)
        return {"cells": out}

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        cells = []
        for c in payload["cells"]:
            nan = lambda v: math.nan if v is None else float(v)
            cells.append(
                EvalCell(
                    c["form"], c["protocol"], nan(c.get("rmse_log")), nan(c.get("mbe_log")),
                    int(c.get("n_holdout") or 0), c.get("boot_std"), bool(c.get("failed")), c.get("error"),
                )
            )
        return cls(tuple(cells))

    def to_markdown(self) -> str:
        lines = [
            "| form | protocol | rmse_log | mbe_log | n_holdout | boot_std |",
            "|---|---|---|---|---|---|",
        ]
        for c in self.cells:
            if c.failed:
                lines.append(f"| {c.form} | {c.protocol} | failed | | {c.n_holdout} | |")
                continue
            bs = "" if c.boot_std is None else f"{c.boot_std:.4g}"
            lines.append(f"| {c.form} | {c.protocol} | {c.rmse_log:.4g} | {c.mbe_log:+.4g} | {c.n_holdout} | {bs} |")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _residuals(result: FitResult, holdout: Grid, fold: int) -> tuple[list[Residual], np.ndarray]:
    preds = predict_grid(result, holdout)
    res = [
        Residual(fold, r.n, r.d, r.t, r.loss, float(p)) for r, p in zip(holdout.records, preds)
    ]
    return res, preds


def _evaluate_cell(form: str, grid: Grid, spec: SplitSpec, config: FitConfig, bootstrap_b: int) -> EvalCell:
    label = spec.label
    try:
        if spec.kind == "kfold":
            rmses, mbes, res_all, n_hold = [], [], [], 0
            for i, (train, hold) in enumerate(split_kfold(grid, spec.k, spec.seed)):
                result = fit(form, train, config)
                res, preds = _residuals(result, hold, i)
                rmses.append(rmse_log(preds, hold.loss))
                mbes.append(mbe_log(preds, hold.loss))
                res_all += res
                n_hold += len(hold)
            return EvalCell(
                form, label, float(np.mean(rmses)), float(np.mean(mbes)), n_hold,
                float(np.std(rmses)), residuals=tuple(res_all),
            )
        if spec.kind == "high-axis":
            train, hold = split_high_axis(grid, spec.axis, spec.fraction, config.k)
        else:
            train, hold = grid, grid
        result = fit(form, train, config)
        res, preds = _residuals(result, hold, 0)
        boot_std = None
        if bootstrap_b:
            boot = bootstrap(form, train, config, bootstrap_b, point=result, holdout=hold)
            boot_std = boot["metrics"]["rmse_log"]["std"]
        return EvalCell(
            form, label, rmse_log(preds, hold.loss), mbe_log(preds, hold.loss), len(hold), boot_std,
            residuals=tuple(res),
        )
    except (FitError, SplitError) as exc:
        return EvalCell(form, label, failed=True, error=str(exc))


def evaluate(
    forms: Iterable[str],
    grid: Grid,
    protocols: Sequence[SplitSpec],
    config: FitConfig | None = None,
    bootstrap_b: int = 0,
) -> EvalReport:
    """Fit each form on each protocol's training rows and score the holdout.

    Fit failures are recorded in their cell without aborting the others.
    """
    config = config or FitConfig()
    cells = [
        _evaluate_cell(form, grid, spec, config, bootstrap_b) for form in forms for spec in protocols
    ]
    return EvalReport(tuple(cells))
