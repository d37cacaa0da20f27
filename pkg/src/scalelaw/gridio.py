"""Run records, grids and the ingestion pipeline.

CSV rows become :class:`RunRecord` objects; :func:`load_grid` applies the
fixed preprocessing order (replicate aggregation, unique-data cap, loss
clip) and returns an immutable, sorted :class:`Grid`.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

LossKind = Literal["cross-entropy", "relative-l2", "other-bounded"]
LOSS_KINDS = ("cross-entropy", "relative-l2", "other-bounded")
CLIP_MARGIN = 0.01

DEFAULT_COLUMNS = {
    "n": "n",
    "d": "d",
    "d_budget": "d_budget",
    "t": "t",
    "epochs": "epochs",
    "loss": "loss",
    "c": "c",
    "seed": "seed",
}


class ConfigError(ValueError):
    """Invalid user configuration (exit code 2 at the CLI)."""


class SchemaError(ConfigError):
    """A required CSV column is missing."""


class RowError(ValueError):
    """A CSV row failed validation."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class RunRecord:
    """One measured training run.

    ``d`` is the effective unique-data count; it equals ``d_budget`` until
    :func:`cap_unique_data` caps it at ``t``.
    """

    n: float
    d_budget: float
    t: float
    loss: float
    c: float | None = None
    seed: str | None = None
    tags: tuple[tuple[str, str], ...] = ()
    d: float | None = None

    def __post_init__(self):
        for name in ("n", "d_budget", "t", "loss"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name}={v!r} must be finite and > 0")
        if self.c is not None and not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"c={self.c!r} must be finite and > 0")
        if self.d is None:
            object.__setattr__(self, "d", float(self.d_budget))
        elif not (math.isfinite(self.d) and self.d > 0):
            raise ValueError(f"d={self.d!r} must be finite and > 0")

    @property
    def epochs(self) -> float:
        return self.t / self.d

    @property
    def tag_dict(self) -> dict[str, str]:
        return dict(self.tags)


@dataclass(frozen=True)
class Grid:
    """Preprocessed, immutable collection of records plus dataset metadata."""

    records: tuple[RunRecord, ...]
    l0: float
    loss_kind: str = "cross-entropy"
    name: str = "grid"
    clipped_rows: int = 0

    def __post_init__(self):
        if not self.records:
            raise ValueError("grid has no records")
        if not (math.isfinite(self.l0) and self.l0 > 0):
            raise ValueError(f"l0={self.l0!r} must be finite and > 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name == "c":
            return np.array([np.nan if r.c is None else r.c for r in self.records])
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def n(self) -> np.ndarray:
        return self.column("n")

    @property
    def d(self) -> np.ndarray:
        return self.column("d")

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    @property
    def loss(self) -> np.ndarray:
        return self.column("loss")

    @property
    def c(self) -> np.ndarray | None:
        """Measured compute, or ``None`` when no record carries it."""
        if all(r.c is None for r in self.records):
            return None
        return self.column("c")

    def compute(self, k: float = 6.0) -> np.ndarray:
        """Record compute where present, else ``k*n*t``."""
        c = self.column("c")
        return np.where(np.isnan(c), k * self.n * self.t, c)

    def subset(self, idx: Sequence[int], name: str | None = None) -> "Grid":
        return replace(self, records=tuple(self.records[i] for i in idx), name=name or self.name)

    def filter_tags(self, **wanted: str) -> "Grid":
        keep = [r for r in self.records if all(r.tag_dict.get(k) == v for k, v in wanted.items())]
        return replace(self, records=tuple(keep))

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            row = {"n": r.n, "d": r.d, "t": r.t, "loss": r.loss}
            if r.c is not None:
                row["c"] = r.c
            recs.append(row)
        return {"name": self.name, "l0": self.l0, "loss_kind": self.loss_kind, "records": recs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, indent=1)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "Grid":
        recs = tuple(
            RunRecord(
                n=float(r["n"]),
                d_budget=float(r.get("d_budget", r["d"])),
                t=float(r.get("t", r["d"])),
                loss=float(r["loss"]),
                c=None if r.get("c") is None else float(r["c"]),
                d=float(r["d"]),
            )
            for r in payload["records"]
        )
        return cls(
            records=recs,
            l0=float(payload["l0"]),
            loss_kind=payload.get("loss_kind", "cross-entropy"),
            name=payload.get("name", "grid"),
        )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def baseline_l0(loss_kind: str, k_outcomes: int | None = None, value: float | None = None) -> float:
    """Loss of a predictor that ignores its input.

    Cross-entropy over ``k_outcomes`` classes gives ``ln k``; relative L2 on
    normalized targets gives 1.  ``other-bounded`` passes ``value`` through.
    """
    if loss_kind == "cross-entropy":
        if k_outcomes is None or k_outcomes < 2:
            raise ConfigError("cross-entropy baseline needs k_outcomes >= 2")
        return math.log(k_outcomes)
    if loss_kind == "relative-l2":
        return 1.0
    if loss_kind == "other-bounded":
        if value is None or not (math.isfinite(value) and value > 0):
            raise ConfigError("other-bounded baseline needs an explicit positive l0")
        return float(value)
    raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")


def cap_unique_data(record: RunRecord) -> RunRecord:
    """Cap effective unique data at the number of examples actually seen."""
    d = min(record.d_budget, record.t)
    return record if d == record.d else replace(record, d=d)


def clip_loss(record: RunRecord, l0: float, margin: float = CLIP_MARGIN) -> tuple[RunRecord, bool]:
    """Clip the loss to ``l0 - margin``; returns ``(record, was_clipped)``."""
    ceiling = l0 - margin
    if record.loss > ceiling:
        return replace(record, loss=ceiling), True
    return record, False


def aggregate_replicates(records: Iterable[RunRecord], mode: str = "mean") -> list[RunRecord]:
    """Collapse replicates sharing ``(n, d_budget, t)`` into one record."""
    if mode not in ("mean", "min"):
        raise ConfigError(f"aggregation mode must be 'mean' or 'min', got {mode!r}")
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for r in records:
        groups[(r.n, r.d_budget, r.t)].append(r)
    out = []
    for key, grp in groups.items():
        kinds = {r.tag_dict.get("loss_kind") for r in grp}
        if len(kinds) > 1:
            raise ValueError(f"mixed loss_kind within replicate group {key}: {sorted(map(str, kinds))}")
        if len(grp) == 1:
            out.append(grp[0])
            continue
        losses = np.array([r.loss for r in grp])
        loss = float(losses.mean()) if mode == "mean" else float(losses.min())
        cs = [r.c for r in grp if r.c is not None]
        c = float(np.mean(cs)) if cs else None
        # keep only tags shared by every replicate
        common = set(grp[0].tags).intersection(*(set(r.tags) for r in grp[1:]))
        out.append(
            RunRecord(
                n=grp[0].n,
                d_budget=grp[0].d_budget,
                t=grp[0].t,
                loss=loss,
                c=c,
                tags=tuple(sorted(common)),
                d=min(r.d for r in grp),
            )
        )
    return out


def preprocess(
    records: Iterable[RunRecord],
    l0: float,
    aggregate: str | None = "mean",
    cap: bool = True,
    clip: bool = True,
    margin: float = CLIP_MARGIN,
) -> tuple[list[RunRecord], int]:
    """Aggregation, then D-cap, then clip; sorted by ``(n, d, t)``."""
    recs = list(records)
    if aggregate:
        recs = aggregate_replicates(recs, aggregate)
    if cap:
        recs = [cap_unique_data(r) for r in recs]
    n_clipped = 0
    if clip:
        clipped = [clip_loss(r, l0, margin) for r in recs]
        recs = [r for r, _ in clipped]
        n_clipped = sum(flag for _, flag in clipped)
    recs.sort(key=lambda r: (r.n, r.d, r.t, r.loss))
    return recs, n_clipped


def make_grid(
    records: Iterable[RunRecord],
    l0: float,
    loss_kind: str = "cross-entropy",
    name: str = "grid",
    **preprocess_flags,
) -> Grid:
    recs, n_clipped = preprocess(records, l0, **preprocess_flags)
    return Grid(tuple(recs), l0, loss_kind, name, n_clipped)


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------


def load_column_map(path: str | Path | None) -> dict[str, str]:
    """Column-name map from a JSON file (logical name -> CSV header)."""
    cols = dict(DEFAULT_COLUMNS)
    if path is None:
        return cols
    with open(path, encoding="utf-8") as fh:
        user = json.load(fh)
    unknown = set(user) - set(DEFAULT_COLUMNS) - {"tags"}
    if unknown:
        raise ConfigError(f"unknown logical columns in column map: {sorted(unknown)}")
    cols.update(user)
    return cols


def _parse_positive(raw: str, name: str, line: int) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise RowError(f"{name}={raw!r} is not a number", line) from None
    if not (math.isfinite(v) and v > 0):
        raise RowError(f"{name}={raw!r} must be finite and > 0", line)
    return v


def read_records(path: str | Path, columns: Mapping[str, str] | None = None) -> list[RunRecord]:
    """Parse a header CSV into raw (unprocessed) records."""
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        present = {k for k, v in cols.items() if isinstance(v, str) and v in header}
        if "n" not in present:
            raise SchemaError(f"missing required column {cols['n']!r}")
        if "loss" not in present:
            raise SchemaError(f"missing required column {cols['loss']!r}")
        if not present & {"d", "d_budget"}:
            raise SchemaError(f"missing required column {cols['d']!r} (or {cols['d_budget']!r})")
        d_key = "d_budget" if "d_budget" in present else "d"
        tag_cols = cols.get("tags")
        if tag_cols is None:
            used = {cols[k] for k in present}
            tag_cols = [h for h in header if h not in used]
        records = []
        for row in reader:
            line = reader.line_num
            n = _parse_positive(row[cols["n"]], "n", line)
            d = _parse_positive(row[cols[d_key]], d_key, line)
            if "t" in present and row[cols["t"]].strip():
                t = _parse_positive(row[cols["t"]], "t", line)
            elif "epochs" in present and row[cols["epochs"]].strip():
                t = d * _parse_positive(row[cols["epochs"]], "epochs", line)
            else:
                # single-epoch convention
                t = d
            loss = _parse_positive(row[cols["loss"]], "loss", line)
            c = None
            if "c" in present and row[cols["c"]].strip():
                c = _parse_positive(row[cols["c"]], "c", line)
            seed = row[cols["seed"]].strip() or None if "seed" in present else None
            tags = tuple(sorted((h, row[h]) for h in tag_cols if h in row and row[h] is not None))
            records.append(RunRecord(n=n, d_budget=d, t=t, loss=loss, c=c, seed=seed, tags=tags))
    if not records:
        raise ValueError(f"{path}: grid is empty")
    return records


def load_grid(
    path: str | Path,
    l0: float,
    loss_kind: str = "cross-entropy",
    columns: Mapping[str, str] | None = None,
    name: str | None = None,
    aggregate: str | None = "mean",
    cap: bool = True,
    clip: bool = True,
    margin: float = CLIP_MARGIN,
    tag_filter: Mapping[str, str] | None = None,
) -> Grid:
    """Read and preprocess a grid CSV.

    Accepts canonical grid JSON as well (suffix ``.json``), in which case the
    stored records are used as-is.
    """
    path = Path(path)
    if path.suffix == ".json":
        return read_grid_json(path)
    records = read_records(path, columns)
    if tag_filter:
        records = [r for r in records if all(r.tag_dict.get(k) == v for k, v in tag_filter.items())]
    if not records:
        raise ValueError(f"{path}: no records left after tag filtering")
    return make_grid(
        records, l0, loss_kind, name or path.stem, aggregate=aggregate, cap=cap, clip=clip, margin=margin
    )


def read_grid_json(path: str | Path) -> Grid:
    with open(path, encoding="utf-8") as fh:
        return Grid.from_dict(json.load(fh))


def write_grid_csv(grid: Grid, path: str | Path) -> None:
    has_c = grid.c is not None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "d", "t", "loss"] + (["c"] if has_c else []))
        for r in grid.records:
            row = [repr(r.n), repr(r.d), repr(r.t), repr(r.loss)]
            if has_c:
                row.append("" if r.c is None else repr(r.c))
            w.writerow(row)
