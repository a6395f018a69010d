"""Long-format multivariate longitudinal data: loading, validation, indexing.

A panel is a set of units, each observed on up to H outcomes at unit-specific
occasions.  Missing responses are represented by absent rows; a retained row
always carries a finite response and a complete covariate vector.  Rows are
stored canonically ordered by (unit, outcome, occasion) so that downstream
computations are independent of input row order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError

__all__ = [
    "ColumnSchema",
    "UnitRecord",
    "PanelDataset",
    "PanelSummary",
    "load_csv",
    "write_csv",
    "summarize",
    "complete_cases",
]

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class ColumnSchema:
    """Column names of the long-format file.

    covariates = None means every header column other than the four reserved
    ones is a covariate, in header order.
    """

    unit: str = "unit"
    occasion: str = "occasion"
    outcome: str = "outcome"
    response: str = "y"
    covariates: tuple[str, ...] | None = None


@dataclass
class UnitRecord:
    """All observations of one unit: (occasion, outcome label, y, covariates)."""

    unit_id: str
    observations: list[tuple[float, str, float, np.ndarray]]


class PanelDataset:
    """Validated panel held as flat arrays plus label tables.

    unit_ids keep their order of first appearance; outcome_names are sorted
    lexicographically, and "first outcome" in reporting conventions refers to
    outcome_names[0].
    """

    def __init__(self, unit_ids, outcome_names, covariate_names,
                 unit_idx, out_idx, occasion, y, X):
        self.unit_ids = list(unit_ids)
        self.outcome_names = list(outcome_names)
        self.covariate_names = list(covariate_names)
        unit_idx = np.asarray(unit_idx, dtype=np.int64)
        out_idx = np.asarray(out_idx, dtype=np.int64)
        occasion = np.asarray(occasion, dtype=float)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError("covariate matrix must have one row per observation")
        if y.size == 0:
            raise DataError("panel contains no observations")
        if X.shape[1] != len(self.covariate_names):
            raise DataError("covariate matrix width does not match covariate names")
        if not np.all(np.isfinite(y)):
            raise DataError("responses must be finite")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates must be finite")
        if not np.all(np.isfinite(occasion)):
            raise DataError("occasions must be finite")
        if unit_idx.min() < 0 or unit_idx.max() >= len(self.unit_ids):
            raise DataError("unit index out of range")
        if out_idx.min() < 0 or out_idx.max() >= len(self.outcome_names):
            raise DataError("outcome index out of range")
        if len(set(self.unit_ids)) != len(self.unit_ids):
            raise DataError("unit identifiers must be unique")

        order = np.lexsort((occasion, out_idx, unit_idx))
        self.unit_idx = unit_idx[order]
        self.out_idx = out_idx[order]
        self.occasion = occasion[order]
        self.y = y[order]
        self.X = X[order]

        key = np.stack([self.unit_idx, self.out_idx], axis=1)
        same = np.all(key[1:] == key[:-1], axis=1) & (np.diff(self.occasion) == 0.0)
        if np.any(same):
            r = int(np.argmax(same))
            raise DataError(
                "duplicate (unit, occasion, outcome) triple: "
                f"({self.unit_ids[self.unit_idx[r]]}, {self.occasion[r]:g}, "
                f"{self.outcome_names[self.out_idx[r]]})"
            )
        # drop units that lost every row (e.g. after filtering)
        present = np.zeros(len(self.unit_ids), dtype=bool)
        present[self.unit_idx] = True
        if not np.all(present):
            keep = np.flatnonzero(present)
            remap = -np.ones(len(self.unit_ids), dtype=np.int64)
            remap[keep] = np.arange(keep.size)
            self.unit_ids = [self.unit_ids[i] for i in keep]
            self.unit_idx = remap[self.unit_idx]

    # ------------------------------------------------------------------
    # basic dimensions
    # ------------------------------------------------------------------
    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcome_names)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def occasions_per_unit(self) -> np.ndarray:
        """T_i: number of distinct occasions per unit, across outcomes."""
        counts = np.zeros(self.n_units, dtype=np.int64)
        for i in range(self.n_units):
            counts[i] = np.unique(self.occasion[self.unit_idx == i]).size
        return counts

    @property
    def units(self) -> list[UnitRecord]:
        recs = [UnitRecord(uid, []) for uid in self.unit_ids]
        for r in range(self.n_rows):
            recs[self.unit_idx[r]].observations.append(
                (float(self.occasion[r]), self.outcome_names[self.out_idx[r]],
                 float(self.y[r]), self.X[r].copy())
            )
        return recs

    def rows_for_outcome(self, h: int) -> np.ndarray:
        return np.flatnonzero(self.out_idx == h)

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.outcome_names == other.outcome_names
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.unit_idx, other.unit_idx)
            and np.array_equal(self.out_idx, other.out_idx)
            and np.array_equal(self.occasion, other.occasion)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
        )


@dataclass
class PanelSummary:
    n_units: int
    n_rows: int
    n_outcomes: int
    n_covariates: int
    outcome_names: list[str]
    covariate_names: list[str]
    t_distribution: dict[int, int]
    complete_fraction: float
    response_stats: dict[str, dict[str, float]] = field(default_factory=dict)


def _parse_float(token: str, what: str, row: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"non-numeric {what}: {token!r}", row=row) from None


def load_csv(path, schema: ColumnSchema | None = None) -> PanelDataset:
    """Read a long-format CSV into a validated :class:`PanelDataset`.

    Blank or NA response fields drop the row (missingness by absence); blank
    covariate fields are an error, since covariates must be complete wherever
    a response is observed.
    """
    schema = schema or ColumnSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", row=1) from None
        except csv.Error as exc:
            raise ParseError(str(exc), row=1) from None
        header = [h.strip() for h in header]
        required = [schema.unit, schema.occasion, schema.outcome, schema.response]
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"missing required columns {missing}", row=1)
        if schema.covariates is None:
            cov_names = [c for c in header if c not in required]
        else:
            cov_names = list(schema.covariates)
            absent = [c for c in cov_names if c not in header]
            if absent:
                raise ParseError(f"missing covariate columns {absent}", row=1)
        pos = {c: header.index(c) for c in required + cov_names}

        unit_ids: list[str] = []
        unit_pos: dict[str, int] = {}
        outcome_set: set[str] = set()
        raw = []
        try:
            for rowno, tokens in enumerate(reader, start=2):
                if not tokens:
                    continue
                if len(tokens) != len(header):
                    raise ParseError(
                        f"expected {len(header)} fields, found {len(tokens)}", row=rowno
                    )
                y_tok = tokens[pos[schema.response]].strip()
                if y_tok.lower() in _MISSING_TOKENS:
                    continue
                y_val = _parse_float(y_tok, "response", rowno)
                if not np.isfinite(y_val):
                    continue
                uid = tokens[pos[schema.unit]].strip()
                occ = _parse_float(tokens[pos[schema.occasion]].strip(), "occasion", rowno)
                out = tokens[pos[schema.outcome]].strip()
                xs = np.empty(len(cov_names))
                for j, cname in enumerate(cov_names):
                    tok = tokens[pos[cname]].strip()
                    if tok.lower() in _MISSING_TOKENS:
                        raise ParseError(
                            f"missing covariate {cname!r} on an observed row", row=rowno
                        )
                    xs[j] = _parse_float(tok, f"covariate {cname!r}", rowno)
                if uid not in unit_pos:
                    unit_pos[uid] = len(unit_ids)
                    unit_ids.append(uid)
                outcome_set.add(out)
                raw.append((unit_pos[uid], out, occ, y_val, xs))
        except csv.Error as exc:
            raise ParseError(str(exc), row=reader.line_num) from None

    if not raw:
        raise DataError("no usable observations in file")
    outcome_names = sorted(outcome_set)
    out_pos = {name: h for h, name in enumerate(outcome_names)}
    n = len(raw)
    unit_idx = np.fromiter((r[0] for r in raw), dtype=np.int64, count=n)
    out_idx = np.fromiter((out_pos[r[1]] for r in raw), dtype=np.int64, count=n)
    occasion = np.fromiter((r[2] for r in raw), dtype=float, count=n)
    y = np.fromiter((r[3] for r in raw), dtype=float, count=n)
    X = np.vstack([r[4] for r in raw]) if cov_names else np.empty((n, 0))
    return PanelDataset(unit_ids, outcome_names, cov_names, unit_idx, out_idx, occasion, y, X)


def write_csv(data: PanelDataset, path, schema: ColumnSchema | None = None) -> None:
    """Write the canonical long-format CSV; numbers use 12 significant digits."""
    schema = schema or ColumnSchema()
    cov_names = data.covariate_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.unit, schema.occasion, schema.outcome, schema.response, *cov_names])
        for r in range(data.n_rows):
            writer.writerow(
                [
                    data.unit_ids[data.unit_idx[r]],
                    f"{data.occasion[r]:.12g}",
                    data.outcome_names[data.out_idx[r]],
                    f"{data.y[r]:.12g}",
                    *(f"{v:.12g}" for v in data.X[r]),
                ]
            )


def _complete_mask(data: PanelDataset, t_full: int) -> np.ndarray:
    """Units observed at t_full occasions for every outcome."""
    counts = np.zeros((data.n_units, data.n_outcomes), dtype=np.int64)
    np.add.at(counts, (data.unit_idx, data.out_idx), 1)
    return np.all(counts == t_full, axis=1)


def summarize(data: PanelDataset) -> PanelSummary:
    """Dimensions, occasion-count distribution, and per-outcome response stats."""
    t_counts = data.occasions_per_unit
    dist = {int(t): int(np.sum(t_counts == t)) for t in np.unique(t_counts)}
    t_full = int(t_counts.max())
    complete = _complete_mask(data, t_full)
    stats: dict[str, dict[str, float]] = {}
    for h, name in enumerate(data.outcome_names):
        vals = data.y[data.out_idx == h]
        stats[name] = {
            "n": int(vals.size),
            "mean": float(vals.mean()),
            "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "min": float(vals.min()),
            "q25": float(np.quantile(vals, 0.25)),
            "median": float(np.quantile(vals, 0.5)),
            "q75": float(np.quantile(vals, 0.75)),
            "max": float(vals.max()),
        }
    return PanelSummary(
        n_units=data.n_units,
        n_rows=data.n_rows,
        n_outcomes=data.n_outcomes,
        n_covariates=data.n_covariates,
        outcome_names=list(data.outcome_names),
        covariate_names=list(data.covariate_names),
        t_distribution=dist,
        complete_fraction=float(complete.mean()),
        response_stats=stats,
    )


def complete_cases(data: PanelDataset, t_full: int) -> PanelDataset:
    """Sub-panel of units observed at all t_full occasions on every outcome."""
    if t_full < 1:
        raise DataError(f"t_full must be at least 1, got {t_full}")
    keep_units = _complete_mask(data, t_full)
    if not np.any(keep_units):
        raise DataError(f"no unit is complete at {t_full} occasions")
    keep_rows = keep_units[data.unit_idx]
    return PanelDataset(
        data.unit_ids,
        data.outcome_names,
        data.covariate_names,
        data.unit_idx[keep_rows],
        data.out_idx[keep_rows],
        data.occasion[keep_rows],
        data.y[keep_rows],
        data.X[keep_rows],
    )
