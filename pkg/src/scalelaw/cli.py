"""``scalelaw`` command-line interface.

Exit codes: 0 ok, 2 configuration error, 3 fit failure, 4 infeasible
allocation, 5 I/O or input-data error.  Errors are written to stderr as a
JSON object.  Every JSON output embeds a ``manifest`` block; CSV outputs get
a ``<file>.manifest.json`` sidecar.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .alloc import (
    FRONTIER_COLUMNS,
    AllocationError,
    InfeasibleTargetError,
    PriceModel,
    frontier_rows,
    pareto_frontier,
    solve_budget,
    solve_target,
)
from .evaluation import EvalReport, SplitSpec, bootstrap, evaluate
from .fit import WORKERS_ENV, EHinge, FitConfig, FitError, FitResult, fit
from .forms import FORM_IDS, InvalidParametersError, OursParams, Point, predict
from .gridio import LOSS_KINDS, ConfigError, Grid, RowError, baseline_l0, load_column_map, load_grid, write_grid_csv
from .verify import SynthDesign, check_limits, isoflop_curves, synth_grid

EXIT_OK, EXIT_CONFIG, EXIT_FIT, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int, kind: str = "error", **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _clean(obj):
    """Replace non-finite floats with None so output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    # float repr is the shortest string that round-trips, so output is
    # lossless and byte-stable
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def manifest(args: argparse.Namespace, config_hash: str | None = None) -> dict:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "output")}
    digest = hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return {
        "tool": "scalelaw",
        "version": __version__,
        "command": args.command,
        "args_hash": digest,
        "config_hash": config_hash,
        "seed": getattr(args, "seed", None),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _write_text(path: str | None, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO, "io") from None


def write_json(path: str | None, payload: dict, man: dict):
    _write_text(path, dumps({**payload, "manifest": man}))


def write_csv(path: str | None, text: str, man: dict):
    _write_text(path, text)
    if path and path != "-":
        _write_text(f"{path}.manifest.json", dumps(man))


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO, "io") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}", EXIT_IO, "io") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated list of numbers, got {text!r}", EXIT_CONFIG, "config") from None


# ---------------------------------------------------------------------------
# Shared argument groups
# ---------------------------------------------------------------------------


def _add_grid_args(p: argparse.ArgumentParser):
    p.add_argument("grid", help="grid CSV (or canonical grid JSON)")
    p.add_argument("--l0", type=float, help="baseline loss; overrides --loss-kind/--k-outcomes")
    p.add_argument("--loss-kind", choices=LOSS_KINDS, default="cross-entropy")
    p.add_argument("--k-outcomes", type=int, help="number of classes/tokens for cross-entropy l0 = ln k")
    p.add_argument("--columns", help="JSON file mapping logical columns (n, d, t, loss, ...) to CSV headers")
    p.add_argument("--aggregate", choices=("mean", "min", "none"), default="mean")
    p.add_argument("--clip-margin", type=float, default=0.01)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--no-cap", action="store_true", help="skip d = min(d_budget, t)")
    p.add_argument("--tag", action="append", default=[], metavar="KEY=VALUE", help="keep rows with this tag value")


def _add_fit_args(p: argparse.ArgumentParser):
    p.add_argument("--restarts", type=int, help="default 30 (200 for farseer)")
    p.add_argument("--huber-tau", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--grad-tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--e-hinge", action="store_true", help="add the one-sided prior on ln e (wrapper forms only)")
    p.add_argument("--kappa", type=float, default=1.5)
    p.add_argument("--lambda-per-row", type=float, default=0.25)
    p.add_argument("--farseer-anchor", help="JSON file or inline JSON object of farseer anchor values")
    p.add_argument("--m4-axis", choices=("n", "d", "c"), default="d")
    p.add_argument("--bnsl-scalar", choices=("compute", "knt", "n", "d", "t"), default="compute")
    p.add_argument("--k", type=float, default=6.0, help="FLOPs per parameter-example")
    p.add_argument("--workers", type=int, help=f"worker processes (env {WORKERS_ENV})")


def _load_grid(args) -> Grid:
    path = Path(args.grid)
    if path.suffix == ".json":
        try:
            return load_grid(path, 1.0)
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc}", EXIT_IO, "io") from None
    if args.l0 is not None:
        l0 = args.l0
    else:
        l0 = baseline_l0(args.loss_kind, args.k_outcomes)
    tags = {}
    for item in args.tag:
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"--tag expects KEY=VALUE, got {item!r}", EXIT_CONFIG, "config")
        tags[key] = val
    try:
        return load_grid(
            path,
            l0,
            args.loss_kind,
            columns=load_column_map(args.columns),
            aggregate=None if args.aggregate == "none" else args.aggregate,
            cap=not args.no_cap,
            clip=not args.no_clip,
            margin=args.clip_margin,
            tag_filter=tags or None,
        )
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO, "io") from None


def _fit_config(args) -> FitConfig:
    anchor = None
    if args.farseer_anchor:
        text = args.farseer_anchor
        anchor = json.loads(text) if text.lstrip().startswith("{") else _read_json(text)
    return FitConfig(
        restarts=args.restarts,
        huber_tau=args.huber_tau,
        max_iters=args.max_iters,
        grad_tol=args.grad_tol,
        seed=args.seed,
        e_hinge=EHinge(args.kappa, args.lambda_per_row) if args.e_hinge else None,
        farseer_anchor=anchor,
        m4_axis=args.m4_axis,
        bnsl_scalar=args.bnsl_scalar,
        k=args.k,
        workers=args.workers,
    )


def _check_form(form: str):
    if form not in FORM_IDS:
        raise CliError(f"unknown form {form!r}; valid ids: {', '.join(FORM_IDS)}", EXIT_CONFIG, "config")


def _load_fit(path: str) -> FitResult:
    payload = _read_json(path)
    if "form" not in payload or "params" not in payload or "l0" not in payload:
        raise CliError(f"{path} needs 'form', 'params' and 'l0' fields", EXIT_CONFIG, "config")
    _check_form(payload["form"])
    return FitResult.from_dict(payload)


def _ours_from_fit(res: FitResult) -> tuple[OursParams, str]:
    """Map a fitted ours-family form onto (OursParams, wrapper)."""
    v = dict(res.params.values)
    form = res.form
    if form == "ours-single-exp":
        v["delta"] = v["gamma"]
    if form == "ours-no-overfit":
        v.update(c=0.0, gamma=0.0, delta=0.0)
    if form not in ("ours", "ours-no-wrapper", "ours-no-overfit", "ours-exp-wrapper", "ours-single-exp"):
        raise CliError(f"allocation needs an ours-family fit, not {form!r}", EXIT_CONFIG, "config")
    wrapper = {"ours-no-wrapper": "none", "ours-exp-wrapper": "exponential"}.get(form, "rational")
    return OursParams.from_mapping(v), wrapper


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    _check_form(args.form)
    grid = _load_grid(args)
    config = _fit_config(args)
    result = fit(args.form, grid, config)
    payload = result.to_dict()
    if args.bootstrap:
        payload["bootstrap"] = bootstrap(args.form, grid, config, args.bootstrap, point=result)
    write_json(args.output, payload, manifest(args, result.config_hash))
    return EXIT_OK


def cmd_eval(args) -> int:
    forms = [f.strip() for f in args.forms.split(",") if f.strip()]
    for f in forms:
        _check_form(f)
    protocols = [SplitSpec.parse(p, seed=args.seed) for p in args.protocols.split(",") if p.strip()]
    grid = _load_grid(args)
    config = _fit_config(args)
    report = evaluate(forms, grid, protocols, config, bootstrap_b=args.bootstrap)
    man = manifest(args)
    out = args.output
    write_csv(out, report.to_csv(), man)
    if out and out != "-":
        stem = str(Path(out).with_suffix(""))
        write_json(f"{stem}.json", report.to_dict(), man)
        write_csv(f"{stem}.residuals.csv", report.residuals_csv(), man)
    return EXIT_OK


def cmd_predict(args) -> int:
    res = _load_fit(args.fit)
    ns, ds = _floats(args.n), _floats(args.d)
    ts = _floats(args.t) if args.t else ds
    if not (len(ns) == len(ds) == len(ts)):
        raise CliError("--n, --d and --t need the same number of values", EXIT_CONFIG, "config")
    opts = {k: res.options[k] for k in ("m4_axis", "bnsl_scalar", "k") if k in res.options}
    rows = [
        {"n": n, "d": d, "t": t, "loss": predict(res.form, res.params, Point(n, d, t), res.l0, **opts)}
        for n, d, t in zip(ns, ds, ts)
    ]
    write_json(args.output, {"form": res.form, "predictions": rows}, manifest(args, res.config_hash))
    return EXIT_OK


def _prices(args) -> PriceModel:
    return PriceModel(args.rho_d, args.rho_c, args.k)


def _write_frontier(args, params, l0, prices, wrapper, budgets):
    pts = pareto_frontier(params, l0, prices, budgets, wrapper)
    lines = [",".join(FRONTIER_COLUMNS)]
    for row in frontier_rows(pts):
        lines.append(",".join("" if v is None else repr(float(v)) for v in row))
    write_csv(args.output, "\n".join(lines) + "\n", manifest(args))


def cmd_allocate(args) -> int:
    res = _load_fit(args.fit)
    params, wrapper = _ours_from_fit(res)
    prices = _prices(args)
    chosen = [x is not None for x in (args.budget, args.target_loss, args.frontier)]
    if sum(chosen) != 1:
        raise CliError("give exactly one of --budget, --target-loss, --frontier", EXIT_CONFIG, "config")
    if args.frontier is not None:
        _write_frontier(args, params, res.l0, prices, wrapper, _floats(args.frontier))
        return EXIT_OK
    if args.budget is not None:
        out = solve_budget(params, res.l0, prices, args.budget, wrapper)
    else:
        out = solve_target(params, res.l0, prices, args.target_loss, wrapper)
    write_json(args.output, {"allocation": out.to_dict(), "prices": vars(prices)}, manifest(args))
    return EXIT_OK


def cmd_frontier(args) -> int:
    res = _load_fit(args.fit)
    params, wrapper = _ours_from_fit(res)
    _write_frontier(args, params, res.l0, _prices(args), wrapper, _floats(args.budgets))
    return EXIT_OK


def cmd_synth(args) -> int:
    payload = _read_json(args.params) if not args.params.lstrip().startswith("{") else json.loads(args.params)
    values = payload.get("params", payload)
    params = OursParams.from_mapping(values)
    design = SynthDesign(_floats(args.n_values), _floats(args.d_values), _floats(args.epochs), args.sigma, args.seed)
    grid = synth_grid(params, args.l0, design, name=args.name)
    if args.output and args.output.endswith(".csv"):
        write_grid_csv(grid, args.output)
        _write_text(f"{args.output}.manifest.json", dumps(manifest(args)))
    else:
        write_json(args.output, grid.to_dict(), manifest(args))
    return EXIT_OK


def cmd_verify(args) -> int:
    res = _load_fit(args.params)
    l0 = args.l0 if args.l0 is not None else res.l0
    opts = {k: res.options[k] for k in ("m4_axis", "bnsl_scalar", "k") if k in res.options}
    report = check_limits(res.form, res.params, l0, args.extreme, **opts)
    payload = {"limits": report.to_dict(), "all_pass": report.all_pass}
    if args.isoflop:
        params, _ = _ours_from_fit(res)
        table = isoflop_curves(params, l0, _floats(args.c_values), args.d, args.k, args.n_samples)
        write_csv(args.isoflop, table.to_csv(), manifest(args))
    write_json(args.output, payload, manifest(args))
    return EXIT_OK


def cmd_report(args) -> int:
    payload = _read_json(args.report)
    cells = payload.get("cells")
    if cells is None:
        raise CliError(f"{args.report} is not an evaluation report", EXIT_CONFIG, "config")
    _write_text(args.output, EvalReport.from_dict(payload).to_markdown())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalelaw", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"scalelaw {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one form to a grid")
    _add_grid_args(p)
    _add_fit_args(p)
    p.add_argument("--form", required=True)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap resamples (e.g. 200)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score forms under holdout protocols")
    _add_grid_args(p)
    _add_fit_args(p)
    p.add_argument("--forms", required=True, help="comma-separated form ids")
    p.add_argument("--protocols", default="high-c,high-d,kfold,in-sample")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.add_argument("-o", "--output", help="report CSV; JSON and residual CSV are written next to it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="evaluate a fitted law")
    p.add_argument("fit")
    p.add_argument("--n", required=True, help="comma-separated")
    p.add_argument("--d", required=True, help="comma-separated")
    p.add_argument("--t", help="comma-separated; defaults to d")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_predict)

    for name, helptext in (("allocate", "solve an allocation program"), ("frontier", "sweep budgets")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("fit")
        p.add_argument("--rho-d", type=float, required=True, help="dollars per unique example")
        p.add_argument("--rho-c", type=float, default=1.0, help="dollars per FLOP")
        p.add_argument("--k", type=float, default=6.0)
        p.add_argument("-o", "--output")
        if name == "allocate":
            p.add_argument("--budget", type=float)
            p.add_argument("--target-loss", type=float)
            p.add_argument("--frontier", help="comma-separated budgets; writes a frontier CSV")
            p.set_defaults(func=cmd_allocate)
        else:
            p.add_argument("--budgets", required=True, help="comma-separated ascending budgets")
            p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("synth", help="sample a synthetic grid from known parameters")
    p.add_argument("--params", required=True, help="JSON file or inline JSON with e, a, b, c, alpha, beta, gamma, delta")
    p.add_argument("--l0", type=float, required=True)
    p.add_argument("--n-values", required=True)
    p.add_argument("--d-values", required=True)
    p.add_argument("--epochs", default="1")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("-o", "--output", help="grid .csv or .json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="limit audit and isoFLOP curves")
    p.add_argument("params", help="fit JSON or {form, params, l0} JSON")
    p.add_argument("--l0", type=float)
    p.add_argument("--extreme", type=float, default=1e12, help="coordinate standing in for infinity")
    p.add_argument("--isoflop", metavar="CSV", help="write isoFLOP curves to this CSV")
    p.add_argument("--c-values", default="1e18,1e19,1e20,1e21")
    p.add_argument("--d", type=float, default=1e10)
    p.add_argument("--k", type=float, default=6.0)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="render an evaluation report as Markdown")
    p.add_argument("report", help="report JSON written by 'eval'")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except FitError as exc:
        diag = [{"converged": r.converged, "objective": r.objective} for r in exc.restarts]
        return _fail(EXIT_FIT, "fit-failure", str(exc), restarts=_clean(diag))
    except InfeasibleTargetError as exc:
        return _fail(EXIT_INFEASIBLE, exc.kind, str(exc))
    except AllocationError as exc:
        return _fail(EXIT_INFEASIBLE, "allocation-failure", str(exc))
    except RowError as exc:
        return _fail(EXIT_IO, "row", str(exc), line=exc.line)
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (ConfigError, InvalidParametersError, KeyError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
