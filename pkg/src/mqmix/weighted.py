"""Responsibility-weighted M-quantile regression by IWLS, plus the ML scale update.

The M-step objective for one outcome h is

    sum_{rows, k} z_ik * [ -log B_q(sigma_h) - rho_q((y - x'beta_h - zeta_kh)/sigma_h) ]

maximized jointly in (beta_h, zeta_.h) by iteratively reweighted least squares
on the component-replicated rows (the K mass points enter as indicator
columns whose Gram block is diagonal), and in sigma_h by solving the exact
profile score equation with bracketed bisection.  Each IWLS candidate is a
positive-definite-preconditioned gradient step, so step-halving makes every
sweep a guaranteed descent on the weighted loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .design import DesignBundle
from .errors import ScaleUpdateError, SingularSystemError
from .loss import LossConfig, alid_norm_const, irls_weight, psi, rho

__all__ = [
    "WeightedProblem",
    "FitResult",
    "make_problem",
    "irls_step",
    "fit_mstep",
    "sigma_update",
    "weighted_rho_sum",
    "weighted_objective",
]

_MASS_FLOOR = 1e-12


@dataclass
class WeightedProblem:
    """Stacked weighted regression data.

    case_weights holds the responsibilities in compact (row, component)
    layout: entry (r, k) weights the copy of design row r belonging to
    component k.  sigma records the scales the problem was built with; the
    fitting loop threads updated scales through FitResult.
    """

    bundle: DesignBundle
    responses: np.ndarray
    case_weights: np.ndarray
    loss: LossConfig
    sigma: np.ndarray

    @property
    def n_components(self) -> int:
        return self.case_weights.shape[1]


@dataclass
class FitResult:
    """Regression state: per-outcome coefficients, mass-point locations, scales."""

    beta: np.ndarray  # (H, p)
    zeta: np.ndarray  # (K, H)
    sigma: np.ndarray  # (H,)
    iterations: int = 0
    converged: bool = False
    degenerate: tuple[int, ...] = ()


def make_problem(bundle: DesignBundle, responses, responsibilities, loss: LossConfig, sigma) -> WeightedProblem:
    """Expand unit-level responsibilities (n, K) to row-level case weights."""
    responsibilities = np.asarray(responsibilities, dtype=float)
    return WeightedProblem(
        bundle=bundle,
        responses=np.asarray(responses, dtype=float),
        case_weights=responsibilities[bundle.unit_idx, :],
        loss=loss,
        sigma=np.asarray(sigma, dtype=float).copy(),
    )


def _component_residuals(prob: WeightedProblem, beta_h: np.ndarray, zeta_h: np.ndarray, rows: np.ndarray):
    """Raw residual of every (row, component) copy for one outcome."""
    fit0 = prob.bundle.matrix[rows] @ beta_h
    return prob.responses[rows, None] - fit0[:, None] - zeta_h[None, :]


def weighted_rho_sum(prob: WeightedProblem, beta: np.ndarray, zeta: np.ndarray, sigma: np.ndarray) -> float:
    """sum_{rows, k} z * rho_q((y - fitted)/sigma_h): the IWLS descent target."""
    total = 0.0
    for h in range(prob.bundle.n_outcomes):
        rows = np.flatnonzero(prob.bundle.out_idx == h)
        resid = _component_residuals(prob, beta[h], zeta[:, h], rows) / sigma[h]
        total += float(np.sum(prob.case_weights[rows] * rho(resid, prob.loss)))
    return total


def weighted_objective(prob: WeightedProblem, fit: FitResult) -> float:
    """Responsibility-weighted working log-likelihood (regression part of Q)."""
    total = -weighted_rho_sum(prob, fit.beta, fit.zeta, fit.sigma)
    for h in range(prob.bundle.n_outcomes):
        rows = np.flatnonzero(prob.bundle.out_idx == h)
        w_h = float(prob.case_weights[rows].sum())
        total -= w_h * np.log(alid_norm_const(prob.loss, fit.sigma[h]))
    return total


def _name_singular_columns(a_mat: np.ndarray, labels: list[str]) -> str:
    sym = 0.5 * (a_mat + a_mat.T)
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError:
        return "unidentified collinear columns"
    null = np.abs(vecs[:, 0])
    worst = np.argsort(null)[::-1][:3]
    return ", ".join(labels[j] for j in worst if null[j] > 1e-3)


def irls_step(prob: WeightedProblem, current: FitResult) -> FitResult:
    """One IWLS sweep over all outcomes at fixed scales.

    Never increases the weighted rho sum: the weighted normal equations give
    a descent direction, and the step is halved until descent is realized.
    """
    bundle = prob.bundle
    p = bundle.n_columns
    k_comp = prob.n_components
    new_beta = current.beta.copy()
    new_zeta = current.zeta.copy()
    degenerate: set[int] = set(current.degenerate)

    for h in range(bundle.n_outcomes):
        rows = np.flatnonzero(bundle.out_idx == h)
        x_h = bundle.matrix[rows]
        y_h = prob.responses[rows]
        zw = prob.case_weights[rows]
        s = current.sigma[h]

        resid = _component_residuals(prob, current.beta[h], current.zeta[:, h], rows) / s
        u = zw * irls_weight(resid, prob.loss) / (s * s)
        mass = u.sum(axis=0)
        active = mass > _MASS_FLOOR * max(float(mass.sum()), _MASS_FLOOR)
        degenerate.update(int(k) for k in np.flatnonzero(~active))
        k_act = int(active.sum())
        if k_act == 0:
            continue

        u_act = u[:, active]
        u_row = u.sum(axis=1)
        g_xx = x_h.T @ (x_h * u_row[:, None])
        g_xz = x_h.T @ u_act
        b_x = x_h.T @ (u_row * y_h)
        b_z = u_act.T @ y_h

        a_mat = np.empty((p + k_act, p + k_act))
        a_mat[:p, :p] = g_xx
        a_mat[:p, p:] = g_xz
        a_mat[p:, :p] = g_xz.T
        a_mat[p:, p:] = np.diag(u_act.sum(axis=0))
        rhs = np.concatenate([b_x, b_z])
        labels = list(bundle.labels) + [f"component {k + 1}" for k in np.flatnonzero(active)]
        try:
            sol = np.linalg.solve(a_mat, rhs)
        except np.linalg.LinAlgError:
            raise SingularSystemError(
                f"outcome {bundle.outcome_names[h]!r}: singular weighted normal equations; "
                f"suspect columns: {_name_singular_columns(a_mat, labels)}"
            ) from None
        if not np.all(np.isfinite(sol)):
            raise SingularSystemError(
                f"outcome {bundle.outcome_names[h]!r}: non-finite IWLS solution"
            )

        cand_beta = sol[:p]
        cand_zeta = current.zeta[:, h].copy()
        cand_zeta[active] = sol[p:]

        def rho_h(beta_h, zeta_h):
            r = _component_residuals(prob, beta_h, zeta_h, rows) / s
            return float(np.sum(zw * rho(r, prob.loss)))

        base = rho_h(current.beta[h], current.zeta[:, h])
        allow = base + 1e-13 * (1.0 + abs(base))
        step = 1.0
        accepted = False
        for _ in range(40):
            trial_beta = current.beta[h] + step * (cand_beta - current.beta[h])
            trial_zeta = current.zeta[:, h] + step * (cand_zeta - current.zeta[:, h])
            if rho_h(trial_beta, trial_zeta) <= allow:
                new_beta[h] = trial_beta
                new_zeta[:, h] = trial_zeta
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # zero step: keep current values for this outcome
            new_beta[h] = current.beta[h]
            new_zeta[:, h] = current.zeta[:, h]

    return FitResult(
        beta=new_beta,
        zeta=new_zeta,
        sigma=current.sigma.copy(),
        iterations=current.iterations + 1,
        converged=False,
        degenerate=tuple(sorted(degenerate)),
    )


def sigma_update(residuals, weights, loss: LossConfig, bracket: tuple[float, float] | None = None) -> float:
    """Root of the profile score sum w [psi(r/s) r/s - 1] = 0 in the scale s.

    The left side is nonincreasing in s, so the root is the unique maximizer
    of the weighted working likelihood.  Bisection runs on the multiplicative
    midpoint to relative tolerance 1e-10, which keeps the whole update exactly
    scale-equivariant.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    wsum = float(w.sum())
    if r.size == 0 or wsum <= 0.0:
        raise ScaleUpdateError("no positive-weight residuals for the scale update")

    def score(s: float) -> float:
        t = r / s
        return float(np.sum(w * psi(t, loss) * t)) - wsum

    if bracket is None:
        pos = w > 0
        center = float(np.median(np.abs(r[pos]))) / 0.6745
        if center == 0.0:
            center = float(np.sum(w * np.abs(r)) / wsum) / 0.6745
        if center == 0.0:
            raise ScaleUpdateError("all residuals are zero; scale is not identified")
        lo, hi = center / 2.0, center * 2.0
    else:
        lo, hi = float(bracket[0]), float(bracket[1])
        if not (0.0 < lo < hi):
            raise ScaleUpdateError(f"invalid bracket ({lo}, {hi})")

    for _ in range(10):
        if score(lo) > 0.0:
            break
        lo /= 2.0
    else:
        if score(lo) <= 0.0:
            raise ScaleUpdateError("could not bracket the scale score from below")
    for _ in range(10):
        if score(hi) < 0.0:
            break
        hi *= 2.0
    else:
        if score(hi) >= 0.0:
            raise ScaleUpdateError("could not bracket the scale score from above")

    while hi - lo > 1e-10 * hi:
        mid = float(np.sqrt(lo * hi))
        if score(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(lo * hi))


def fit_mstep(prob: WeightedProblem, init: FitResult, tol: float = 1e-8, max_iter: int = 200) -> FitResult:
    """Alternate IWLS sweeps and scale updates until coefficients settle.

    The stopping threshold is tol times the current scale level, so the whole
    iteration commutes with affine transformations of the response.
    Non-convergence within max_iter is reported through the flag, not raised.
    """
    bundle = prob.bundle
    cur = replace(init, iterations=0, converged=False)
    for it in range(1, max_iter + 1):
        stepped = irls_step(prob, cur)
        new_sigma = cur.sigma.copy()
        for h in range(bundle.n_outcomes):
            rows = np.flatnonzero(bundle.out_idx == h)
            resid = _component_residuals(prob, stepped.beta[h], stepped.zeta[:, h], rows)
            new_sigma[h] = sigma_update(resid, prob.case_weights[rows], prob.loss)
        delta = max(
            float(np.max(np.abs(stepped.beta - cur.beta))),
            float(np.max(np.abs(stepped.zeta - cur.zeta))),
            float(np.max(np.abs(new_sigma - cur.sigma))),
        )
        cur = FitResult(
            beta=stepped.beta,
            zeta=stepped.zeta,
            sigma=new_sigma,
            iterations=it,
            converged=False,
            degenerate=stepped.degenerate,
        )
        if delta < tol * float(np.max(new_sigma)):
            cur = replace(cur, converged=True)
            break
    return cur
