"""Covariance estimation for the fitted mixture.

The observed information J combines the responsibility-weighted complete-data
Hessian (analytic, using the smooth branches of the loss away from its kinks)
with a correction term that differentiates the posterior weights numerically.
The score covariance Kmat stacks per-unit marginal scores obtained from the
responsibility-weighted complete-data scores, and the reported covariance is
the sandwich J^-1 Kmat J^-1.

Masses enter the parameter vector through the logit transform of the first
K-1 components (the last is the reference); standard errors on the mass scale
are recovered by the delta method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import DesignBundle
from .em import MixtureFit, MixtureParams, component_logdensity_matrix, e_step
from .errors import DomainError, NumericalError
from .loss import LossConfig, psi, psi_prime
from .panel import PanelDataset

__all__ = [
    "CovarianceEstimate",
    "param_labels",
    "pack_params",
    "unpack_params",
    "oakes_information",
    "score_covariance",
    "sandwich",
]

_FD_STEP = float(np.cbrt(np.finfo(float).eps))


@dataclass
class CovarianceEstimate:
    J: np.ndarray
    Kmat: np.ndarray
    sandwich: np.ndarray
    se: np.ndarray
    param_labels: list[str]
    pi_se: np.ndarray


def _dims(fit: MixtureFit, bundle: DesignBundle):
    h = bundle.n_outcomes
    p = bundle.n_columns
    k = fit.k
    return h, p, k, h * p + k * h + h + (k - 1)


def param_labels(fit: MixtureFit, bundle: DesignBundle) -> list[str]:
    """Names aligned with the packed parameter vector."""
    h_count, _, k_count, _ = _dims(fit, bundle)
    names = []
    for h in range(h_count):
        out = bundle.outcome_names[h]
        names.extend(f"{out}:{lab}" for lab in bundle.labels)
    for k in range(k_count):
        for h in range(h_count):
            names.append(f"zeta[{k + 1}]:{bundle.outcome_names[h]}")
    names.extend(f"sigma:{bundle.outcome_names[h]}" for h in range(h_count))
    names.extend(f"alpha[{j + 1}]" for j in range(k_count - 1))
    return names


def pack_params(fit: MixtureFit, bundle: DesignBundle) -> np.ndarray:
    """[beta by outcome; zeta component-major; sigma; mass logits]."""
    parts = [fit.beta.ravel(), fit.zeta.ravel(), fit.sigma]
    if fit.k > 1:
        parts.append(np.log(fit.pi[:-1] / fit.pi[-1]))
    return np.concatenate(parts)


def unpack_params(phi: np.ndarray, fit: MixtureFit, bundle: DesignBundle) -> MixtureParams:
    h, p, k, total = _dims(fit, bundle)
    if phi.shape != (total,):
        raise DomainError(f"parameter vector must have length {total}")
    beta = phi[: h * p].reshape(h, p)
    zeta = phi[h * p : h * p + k * h].reshape(k, h)
    sigma = phi[h * p + k * h : h * p + k * h + h]
    if k > 1:
        alpha = phi[h * p + k * h + h :]
        expa = np.exp(np.append(alpha, 0.0))
        pi = expa / expa.sum()
    else:
        pi = np.ones(1)
    return MixtureParams(loss=fit.loss, beta=beta, zeta=zeta, pi=pi, sigma=sigma)


def _complete_scores(data: PanelDataset, bundle: DesignBundle, params: MixtureParams) -> np.ndarray:
    """(n, K, P) array of per-unit complete-data score contributions g_ik."""
    h_count = data.n_outcomes
    p = bundle.n_columns
    k_count = params.k
    total = h_count * p + k_count * h_count + h_count + (k_count - 1)
    n = data.n_units
    g = np.zeros((n, k_count, total))
    zeta_off = h_count * p
    sigma_off = zeta_off + k_count * h_count
    alpha_off = sigma_off + h_count

    for h in range(h_count):
        rows = np.flatnonzero(bundle.out_idx == h)
        x_h = bundle.matrix[rows]
        units = data.unit_idx[rows]
        sig = float(params.sigma[h])
        base = data.y[rows] - x_h @ params.beta[h]
        for k in range(k_count):
            r = (base - params.zeta[k, h]) / sig
            ps = psi(r, params.loss)
            np.add.at(g[:, k, h * p : (h + 1) * p], units, (ps / sig)[:, None] * x_h)
            g[:, k, zeta_off + k * h_count + h] = np.bincount(units, weights=ps / sig, minlength=n)
            g[:, k, sigma_off + h] = np.bincount(units, weights=(ps * r - 1.0) / sig, minlength=n)
    for j in range(k_count - 1):
        g[:, :, alpha_off + j] = -params.pi[j]
        g[:, j, alpha_off + j] += 1.0
    return g


def _weighted_hessian(data: PanelDataset, bundle: DesignBundle, params: MixtureParams,
                      resp: np.ndarray) -> np.ndarray:
    """Responsibility-weighted negative complete-data Hessian (analytic)."""
    h_count = data.n_outcomes
    p = bundle.n_columns
    k_count = params.k
    total = h_count * p + k_count * h_count + h_count + (k_count - 1)
    n = data.n_units
    out = np.zeros((total, total))
    zeta_off = h_count * p
    sigma_off = zeta_off + k_count * h_count
    alpha_off = sigma_off + h_count

    for h in range(h_count):
        rows = np.flatnonzero(bundle.out_idx == h)
        x_h = bundle.matrix[rows]
        units = data.unit_idx[rows]
        sig = float(params.sigma[h])
        base = data.y[rows] - x_h @ params.beta[h]
        sb = slice(h * p, (h + 1) * p)
        i_sig = sigma_off + h
        for k in range(k_count):
            w = resp[units, k]
            r = (base - params.zeta[k, h]) / sig
            ps = psi(r, params.loss)
            dps = psi_prime(r, params.loss)
            i_z = zeta_off + k * h_count + h

            out[sb, sb] += (x_h * (w * dps / sig**2)[:, None]).T @ x_h
            bz = (x_h * (w * dps / sig**2)[:, None]).sum(axis=0)
            out[sb, i_z] += bz
            out[i_z, sb] += bz
            out[i_z, i_z] += float(np.sum(w * dps) / sig**2)

            mix = w * (dps * r + ps) / sig**2
            bs = (x_h * mix[:, None]).sum(axis=0)
            out[sb, i_sig] += bs
            out[i_sig, sb] += bs
            zs = float(mix.sum())
            out[i_z, i_sig] += zs
            out[i_sig, i_z] += zs
            out[i_sig, i_sig] += float(np.sum(w * (dps * r**2 + 2.0 * ps * r - 1.0)) / sig**2)

    if k_count > 1:
        head = params.pi[:-1]
        out[alpha_off:, alpha_off:] = n * (np.diag(head) - np.outer(head, head))
    return out


def oakes_information(fit: MixtureFit, data: PanelDataset, bundle: DesignBundle) -> np.ndarray:
    """Observed information: analytic weighted Hessian minus the numerical
    derivative of the expected complete-data score taken through the posterior
    weights alone."""
    if not fit.converged:
        raise DomainError("covariance estimation requires a converged fit")
    params = fit.params
    resp, _ = e_step(data, bundle, params)
    g = _complete_scores(data, bundle, params)
    j_mat = _weighted_hessian(data, bundle, params, resp)

    if fit.k > 1:
        phi = pack_params(fit, bundle)
        total = phi.shape[0]
        d_mat = np.empty((total, total))
        for j in range(total):
            step = _FD_STEP * max(1.0, abs(float(phi[j])))
            for sign, slot in ((1.0, 0), (-1.0, 1)):
                shifted = phi.copy()
                shifted[j] += sign * step
                r_shift, _ = e_step(data, bundle, unpack_params(shifted, fit, bundle))
                u = np.einsum("ik,ikp->p", r_shift, g)
                if slot == 0:
                    u_plus = u
                else:
                    d_mat[:, j] = (u_plus - u) / (2.0 * step)
        j_mat = j_mat - d_mat

    labels = param_labels(fit, bundle)
    if not np.all(np.isfinite(j_mat)):
        i, j = np.argwhere(~np.isfinite(j_mat))[0]
        raise NumericalError(
            f"observed-information entry ({labels[i]}, {labels[j]}) is not finite"
        )
    return 0.5 * (j_mat + j_mat.T)


def score_covariance(fit: MixtureFit, data: PanelDataset, bundle: DesignBundle) -> np.ndarray:
    """Sum of outer products of per-unit marginal scores (Fisher's identity)."""
    if not fit.converged:
        raise DomainError("covariance estimation requires a converged fit")
    params = fit.params
    resp, _ = e_step(data, bundle, params)
    g = _complete_scores(data, bundle, params)
    s = np.einsum("ik,ikp->ip", resp, g)
    return s.T @ s


def unit_scores(fit: MixtureFit, data: PanelDataset, bundle: DesignBundle) -> np.ndarray:
    """(n, P) matrix of per-unit marginal score vectors S_i."""
    params = fit.params
    resp, _ = e_step(data, bundle, params)
    g = _complete_scores(data, bundle, params)
    return np.einsum("ik,ikp->ip", resp, g)


def sandwich(fit: MixtureFit, data: PanelDataset, bundle: DesignBundle) -> CovarianceEstimate:
    """J^-1 Kmat J^-1 with standard errors from the diagonal."""
    j_mat = oakes_information(fit, data, bundle)
    k_mat = score_covariance(fit, data, bundle)
    labels = param_labels(fit, bundle)

    eigvals = np.linalg.eigvalsh(j_mat)
    if eigvals.min() <= 0.0:
        raise NumericalError(
            "observed information is singular or indefinite "
            f"(smallest eigenvalue {eigvals.min():.3e}); re-fit with a different "
            "start or a smaller number of components"
        )
    half = np.linalg.solve(j_mat, k_mat)
    cov = np.linalg.solve(j_mat, half.T).T
    cov = 0.5 * (cov + cov.T)

    diag = np.diag(cov)
    if np.any(diag < 0.0):
        bad = labels[int(np.argmin(diag))]
        raise NumericalError(
            f"sandwich variance of {bad} is negative; the fit may not have "
            "converged or the model may be misspecified"
        )
    se = np.sqrt(diag)

    if fit.k > 1:
        a0 = fit.beta.size + fit.zeta.size + fit.sigma.size
        v_alpha = cov[a0:, a0:]
        head = fit.pi[:, None] * (np.eye(fit.k)[:, : fit.k - 1] - fit.pi[None, : fit.k - 1])
        pi_cov = head @ v_alpha @ head.T
        pi_se = np.sqrt(np.maximum(np.diag(pi_cov), 0.0))
    else:
        pi_se = np.zeros(1)

    return CovarianceEstimate(J=j_mat, Kmat=k_mat, sandwich=cov, se=se,
                              param_labels=labels, pi_se=pi_se)
