"""Shared builders for the estimation-layer tests."""

import numpy as np

from mqmix.design import CovariateRole, build_design
from mqmix.loss import AlidParams, LossConfig, alid_sample
from mqmix.panel import PanelDataset


def make_panel(rows, outcome_names, cov_names):
    """rows: iterable of (unit_label, occasion, outcome_index, y, covariates...)."""
    units = []
    for r in rows:
        if r[0] not in units:
            units.append(r[0])
    unit_idx = [units.index(r[0]) for r in rows]
    n_cov = len(cov_names)
    X = [list(r[4 : 4 + n_cov]) for r in rows]
    return PanelDataset(
        units,
        outcome_names,
        cov_names,
        unit_idx,
        [r[2] for r in rows],
        [r[1] for r in rows],
        [r[3] for r in rows],
        X,
    )


def mixture_regression_panel(
    rng,
    n_units=120,
    t_len=3,
    beta=(1.0, -0.5),
    zeta=(-2.0, 2.0),
    pi=(0.5, 0.5),
    sigma=1.0,
    loss=None,
):
    """Single-outcome K-component generator returning panel, components, arrays.

    Responses are location-shifted draws from the working density, so the
    fitted level-q location model is correctly specified with the stated
    coefficients.
    """
    loss = loss or LossConfig(q=0.5, c=1.345)
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    sigma = float(sigma)
    comps = rng.choice(len(zeta), size=n_units, p=np.asarray(pi))
    rows = []
    noise = alid_sample(AlidParams(loss=loss, mu=0.0, sigma=1.0), rng, n_units * t_len)
    pos = 0
    for i in range(n_units):
        for t in range(t_len):
            x = rng.normal(size=len(beta))
            y = float(np.dot(beta, x) + zeta[comps[i]] + sigma * noise[pos])
            rows.append((f"u{i}", float(t), 0, y, *x))
            pos += 1
    cov_names = [f"x{j + 1}" for j in range(len(beta))]
    data = make_panel(rows, ["resp"], cov_names)
    roles = [CovariateRole(c, "fixed") for c in cov_names]
    bundle = build_design(data, roles)
    return data, bundle, comps
