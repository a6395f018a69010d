"""Regression design construction, including the correlated-random-effects
expansion of time-varying covariates.

Each covariate is assigned one of three roles.  `fixed` and `time_constant`
covariates pass through as single columns.  A `decomposed` covariate x is
split into a within column (x - mean_i(x)) and a between column mean_i(x),
where the mean is taken per (unit, outcome) over that outcome's observed
occasions; the between columns are the auxiliary-regression block that
absorbs correlation between unit-level heterogeneity and the covariates.
There is no global intercept column: the component locations play that role.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError
from .panel import PanelDataset

__all__ = ["CovariateRole", "DesignBundle", "build_design", "predict"]

_ROLES = ("fixed", "decomposed", "time_constant")


@dataclass(frozen=True)
class CovariateRole:
    """Covariate label and its role: fixed, decomposed, or time_constant."""

    name: str
    role: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise DomainError(f"unknown role {self.role!r} for {self.name!r}; expected one of {_ROLES}")


@dataclass
class DesignBundle:
    """Expanded design rows aligned one-to-one with the panel's observations.

    fixed_dim counts the regression-coefficient columns (raw, within, and
    time-constant), mundlak_dim the unit-mean columns; together they span
    every column of `matrix`.  row-level bookkeeping (unit_idx, out_idx,
    occasion) is copied from the panel so a row can always be traced back to
    its (i, t, h) triple.
    """

    matrix: np.ndarray
    labels: list[str]
    fixed_dim: int
    mundlak_dim: int
    mundlak_cols: np.ndarray
    random_design: np.ndarray
    unit_idx: np.ndarray
    out_idx: np.ndarray
    occasion: np.ndarray
    n_units: int
    n_outcomes: int
    outcome_names: list[str]
    roles: list[CovariateRole]
    mundlak: bool
    rank_warning: bool = False

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


def _unit_outcome_means(data: PanelDataset, col: np.ndarray) -> np.ndarray:
    """Per-row mean of `col` over the row's (unit, outcome) cell."""
    cell = data.unit_idx * data.n_outcomes + data.out_idx
    n_cells = data.n_units * data.n_outcomes
    sums = np.bincount(cell, weights=col, minlength=n_cells)
    counts = np.bincount(cell, minlength=n_cells)
    means = np.zeros(n_cells)
    observed = counts > 0
    means[observed] = sums[observed] / counts[observed]
    return means[cell]


def build_design(
    data: PanelDataset,
    roles: list[CovariateRole],
    mundlak: bool = True,
    scale_by_ti: bool = False,
) -> DesignBundle:
    """Expand covariates into regression columns.

    With mundlak=False decomposed covariates pass through raw, which is the
    uncorrected model used as the comparison point in endogeneity studies.
    scale_by_ti multiplies each between column by the cell's occasion count,
    the literal auxiliary-regression form for unbalanced panels.
    """
    by_name = {r.name: r for r in roles}
    if sorted(by_name) != sorted(data.covariate_names):
        raise DataError(
            f"roles must cover exactly the covariates {data.covariate_names}, got {sorted(by_name)}"
        )
    if len(by_name) != len(roles):
        raise DataError("duplicate covariate in role list")

    cols: list[np.ndarray] = []
    labels: list[str] = []
    mundlak_cols: list[int] = []
    for j, name in enumerate(data.covariate_names):
        role = by_name[name].role
        col = data.X[:, j]
        if role == "decomposed":
            means = _unit_outcome_means(data, col)
            within_var = np.max(np.abs(col - means))
            if within_var == 0.0:
                raise DataError(
                    f"covariate {name!r} is constant within every unit; it cannot be decomposed"
                )
            if not mundlak:
                cols.append(col)
                labels.append(name)
                continue
            cols.append(col - means)
            labels.append(f"{name}_within")
            between = means
            if scale_by_ti:
                # count of observed occasions in the row's (unit, outcome) cell
                cell = data.unit_idx * data.n_outcomes + data.out_idx
                counts = np.bincount(cell, minlength=data.n_units * data.n_outcomes)
                between = means * counts[cell]
            mundlak_cols.append(len(cols))
            cols.append(between)
            labels.append(f"{name}_between")
        else:
            if role == "time_constant":
                means = _unit_outcome_means(data, col)
                if np.max(np.abs(col - means)) > 1e-10 * max(1.0, np.max(np.abs(col))):
                    raise DataError(f"covariate {name!r} varies within units; role time_constant is wrong")
            cols.append(col)
            labels.append(name)

    matrix = np.column_stack(cols) if cols else np.empty((data.n_rows, 0))
    mundlak_idx = np.asarray(mundlak_cols, dtype=np.int64)
    p = matrix.shape[1]
    rank_warning = False
    if p > 0:
        rank = np.linalg.matrix_rank(matrix)
        rank_warning = rank < p
    return DesignBundle(
        matrix=matrix,
        labels=labels,
        fixed_dim=p - mundlak_idx.size,
        mundlak_dim=int(mundlak_idx.size),
        mundlak_cols=mundlak_idx,
        random_design=np.ones(data.n_rows),
        unit_idx=data.unit_idx.copy(),
        out_idx=data.out_idx.copy(),
        occasion=data.occasion.copy(),
        n_units=data.n_units,
        n_outcomes=data.n_outcomes,
        outcome_names=list(data.outcome_names),
        roles=list(roles),
        mundlak=mundlak,
        rank_warning=rank_warning,
    )


def predict(bundle: DesignBundle, beta: np.ndarray, zeta_kh: float, row: int) -> float:
    """Linear predictor of one design row: x'beta + zeta_kh."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (bundle.n_columns,):
        raise DataError(f"beta must have shape ({bundle.n_columns},), got {beta.shape}")
    return float(bundle.matrix[row] @ beta + zeta_kh)
