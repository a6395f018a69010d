"""EM estimation of finite mixtures of M-quantile regressions.

Units share regression coefficients; heterogeneity enters through K discrete
intercept locations per outcome with unknown masses, estimated jointly with
the coefficients by maximum likelihood on the working density.  The E-step is
computed through log-sum-exp, the prior update is in closed form, and the
M-step delegates to the weighted IWLS solver, which makes every iteration an
ascent on the marginal log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .design import DesignBundle
from .errors import (
    DegenerateComponentError,
    DomainError,
    MultiStartError,
    NumericalError,
)
from .loss import LossConfig, alid_norm_const, rho
from .panel import PanelDataset
from .weighted import FitResult, fit_mstep, make_problem

__all__ = [
    "EmControls",
    "MixtureParams",
    "StartSpec",
    "MixtureFit",
    "unit_component_logdensity",
    "component_logdensity_matrix",
    "e_step",
    "m_step_priors",
    "deterministic_start",
    "make_starts",
    "em_fit",
    "multi_start",
]

_MASS_GUARD = 1e-10


@dataclass(frozen=True)
class EmControls:
    """Stopping and admissibility settings for the EM loop.

    criterion "loglik_diff" stops when |l_r - l_{r-1}| < epsilon (the
    difference is invariant under affine response transformations);
    "param_norm" stops when the largest parameter change falls below
    epsilon times the current scale level.
    """

    epsilon: float = 1e-6
    max_iter: int = 500
    min_mass: float = 0.01
    criterion: str = "loglik_diff"
    inner_tol: float = 1e-8
    inner_max_iter: int = 200

    def __post_init__(self):
        if not (self.epsilon > 0.0):
            raise DomainError("epsilon must be positive")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")
        if not (0.0 <= self.min_mass < 1.0):
            raise DomainError("min_mass must lie in [0, 1)")
        if self.criterion not in ("loglik_diff", "param_norm"):
            raise DomainError(f"unknown convergence criterion {self.criterion!r}")


@dataclass
class MixtureParams:
    """One full parameter point: coefficients, locations, masses, scales."""

    loss: LossConfig
    beta: np.ndarray  # (H, p)
    zeta: np.ndarray  # (K, H)
    pi: np.ndarray  # (K,)
    sigma: np.ndarray  # (H,)

    @property
    def k(self) -> int:
        return self.pi.shape[0]


@dataclass
class StartSpec:
    """Initial parameter point plus a label identifying the start."""

    pi: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    sigma: np.ndarray
    label: str


@dataclass
class MixtureFit:
    """Converged (or best-effort) mixture estimate, components sorted by the
    first outcome's location."""

    q: float
    c: float
    beta: np.ndarray
    zeta: np.ndarray
    pi: np.ndarray
    sigma: np.ndarray
    loglik: float
    responsibilities: np.ndarray
    iterations: int
    converged: bool
    seed: str
    loglik_path: np.ndarray
    degenerate: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    @property
    def loss(self) -> LossConfig:
        return LossConfig(q=self.q, c=self.c)

    @property
    def params(self) -> MixtureParams:
        return MixtureParams(loss=self.loss, beta=self.beta, zeta=self.zeta, pi=self.pi, sigma=self.sigma)

    def map_components(self) -> np.ndarray:
        return np.argmax(self.responsibilities, axis=1)


def component_logdensity_matrix(data: PanelDataset, bundle: DesignBundle, params: MixtureParams) -> np.ndarray:
    """(n, K) matrix of log f_ik: each unit's log-density under each component."""
    n, k = data.n_units, params.k
    row_logf = np.empty((data.n_rows, k))
    for h in range(data.n_outcomes):
        rows = np.flatnonzero(bundle.out_idx == h)
        base = bundle.matrix[rows] @ params.beta[h]
        sig = params.sigma[h]
        log_b = np.log(alid_norm_const(params.loss, sig))
        resid = (data.y[rows, None] - base[:, None] - params.zeta[None, :, h]) / sig
        row_logf[rows] = -log_b - rho(resid, params.loss)
    out = np.empty((n, k))
    for j in range(k):
        out[:, j] = np.bincount(data.unit_idx, weights=row_logf[:, j], minlength=n)
    return out


def unit_component_logdensity(data: PanelDataset, bundle: DesignBundle, i: int, k: int, params: MixtureParams) -> float:
    """Log joint density of unit i's observed rows under component k."""
    total = 0.0
    for r in np.flatnonzero(data.unit_idx == i):
        h = int(data.out_idx[r])
        sig = params.sigma[h]
        mu = float(bundle.matrix[r] @ params.beta[h] + params.zeta[k, h])
        t = (data.y[r] - mu) / sig
        total += -np.log(alid_norm_const(params.loss, sig)) - float(rho(t, params.loss))
    return total


def e_step(data: PanelDataset, bundle: DesignBundle, params: MixtureParams):
    """Posterior component probabilities and the marginal log-likelihood."""
    pi = np.asarray(params.pi, dtype=float)
    if abs(float(pi.sum()) - 1.0) > 1e-8 or np.any(pi < 0.0):
        raise DomainError("mixing masses must be nonnegative and sum to one")
    logf = component_logdensity_matrix(data, bundle, params)
    with np.errstate(divide="ignore"):
        joint = logf + np.log(pi)[None, :]
    unit_ll = logsumexp(joint, axis=1)
    if not np.all(np.isfinite(unit_ll)):
        bad = int(np.argmax(~np.isfinite(unit_ll)))
        raise NumericalError(f"log-likelihood of unit {data.unit_ids[bad]!r} is not finite")
    resp = np.exp(joint - unit_ll[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return resp, float(unit_ll.sum())


def m_step_priors(responsibilities: np.ndarray) -> np.ndarray:
    """Closed-form mass update: column means of the responsibilities."""
    resp = np.asarray(responsibilities, dtype=float)
    return resp.mean(axis=0)


def _robust_scale(values: np.ndarray) -> float:
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med))) / 0.6745
    if mad > 0.0:
        return mad
    sd = float(np.std(values))
    return sd if sd > 0.0 else 1.0


def deterministic_start(data: PanelDataset, bundle: DesignBundle, loss: LossConfig, k: int,
                        controls: EmControls | None = None) -> StartSpec:
    """Homogeneous fit for the coefficients; locations at the homogeneous
    intercept plus Gaussian-quadrature offsets scaled by the residual spread."""
    controls = controls or EmControls()
    h_count, p = data.n_outcomes, bundle.n_columns
    sigma0 = np.array([_robust_scale(data.y[data.out_idx == h]) for h in range(h_count)])
    prob = make_problem(bundle, data.y, np.ones((data.n_units, 1)), loss, sigma0)
    init = FitResult(beta=np.zeros((h_count, p)), zeta=np.zeros((1, h_count)), sigma=sigma0)
    base = fit_mstep(prob, init, tol=controls.inner_tol, max_iter=controls.inner_max_iter)

    spread = np.empty(h_count)
    for h in range(h_count):
        rows = np.flatnonzero(bundle.out_idx == h)
        resid = data.y[rows] - bundle.matrix[rows] @ base.beta[h] - base.zeta[0, h]
        spread[h] = _robust_scale(resid)
    nodes = np.polynomial.hermite_e.hermegauss(k)[0]
    zeta = base.zeta[0][None, :] + nodes[:, None] * spread[None, :]
    return StartSpec(
        pi=np.full(k, 1.0 / k),
        beta=base.beta.copy(),
        zeta=zeta,
        sigma=base.sigma.copy(),
        label="deterministic",
    )


def make_starts(data: PanelDataset, bundle: DesignBundle, loss: LossConfig, k: int,
                d: int = 3, seed: int = 0, controls: EmControls | None = None) -> list[StartSpec]:
    """One deterministic start plus d*(k-1) multiplicatively jittered copies."""
    if d < 1:
        raise DomainError("d must be at least 1")
    det = deterministic_start(data, bundle, loss, k, controls)
    starts = [det]
    for j in range(d * (k - 1)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
        beta = det.beta * (1.0 + 0.1 * rng.standard_normal(det.beta.shape))
        zeta = det.zeta * (1.0 + 0.25 * rng.standard_normal(det.zeta.shape))
        starts.append(StartSpec(pi=det.pi.copy(), beta=beta, zeta=zeta,
                                sigma=det.sigma.copy(), label=f"jitter-{j}"))
    return starts


def _sorted_fit(fit: MixtureFit) -> MixtureFit:
    order = np.argsort(fit.zeta[:, 0], kind="stable")
    if np.array_equal(order, np.arange(fit.k)):
        return fit
    remap = {int(old): new for new, old in enumerate(order)}
    return replace(
        fit,
        zeta=fit.zeta[order],
        pi=fit.pi[order],
        responsibilities=fit.responsibilities[:, order],
        degenerate=tuple(sorted(remap[k] for k in fit.degenerate)),
    )


def em_fit(data: PanelDataset, bundle: DesignBundle, loss: LossConfig, k: int,
           controls: EmControls | None = None, start: StartSpec | None = None) -> MixtureFit:
    """Alternate E and M steps from the given start until the stopping rule.

    The log-likelihood path is recorded and is nondecreasing; a mixing mass
    falling below 1e-10 is a hard error naming the component.
    """
    controls = controls or EmControls()
    if k < 1:
        raise DomainError("k must be at least 1")
    if k > 1 and controls.min_mass >= 1.0 / k:
        raise DomainError(f"min_mass {controls.min_mass} is not below 1/k = {1.0 / k:.4f}")
    if start is None:
        start = deterministic_start(data, bundle, loss, k, controls)

    params = MixtureParams(loss=loss, beta=np.array(start.beta, dtype=float),
                           zeta=np.array(start.zeta, dtype=float),
                           pi=np.array(start.pi, dtype=float),
                           sigma=np.array(start.sigma, dtype=float))
    ll_path: list[float] = []
    converged = False
    last_delta = np.inf
    resp = np.full((data.n_units, k), 1.0 / k)

    for _ in range(controls.max_iter):
        resp, ll = e_step(data, bundle, params)
        ll_path.append(ll)
        if len(ll_path) > 1:
            if controls.criterion == "loglik_diff":
                done = abs(ll_path[-1] - ll_path[-2]) < controls.epsilon
            else:
                done = last_delta < controls.epsilon * float(np.max(params.sigma))
            if done:
                converged = True
                break

        pi = m_step_priors(resp)
        if np.any(pi < _MASS_GUARD):
            worst = int(np.argmin(pi))
            raise DegenerateComponentError(
                f"component {worst + 1} mass collapsed to {pi[worst]:.3e}"
            )
        prob = make_problem(bundle, data.y, resp, loss, params.sigma)
        init = FitResult(beta=params.beta, zeta=params.zeta, sigma=params.sigma)
        mres = fit_mstep(prob, init, tol=controls.inner_tol, max_iter=controls.inner_max_iter)
        last_delta = max(
            float(np.max(np.abs(mres.beta - params.beta))),
            float(np.max(np.abs(mres.zeta - params.zeta))),
            float(np.max(np.abs(mres.sigma - params.sigma))),
            float(np.max(np.abs(pi - params.pi))),
        )
        params = MixtureParams(loss=loss, beta=mres.beta, zeta=mres.zeta, pi=pi, sigma=mres.sigma)
    else:
        # loop exhausted: refresh the posterior at the final parameter point
        resp, ll = e_step(data, bundle, params)
        ll_path.append(ll)

    fit = MixtureFit(
        q=loss.q,
        c=loss.c,
        beta=params.beta,
        zeta=params.zeta,
        pi=params.pi,
        sigma=params.sigma,
        loglik=ll_path[-1],
        responsibilities=resp,
        iterations=len(ll_path) - 1,
        converged=converged,
        seed=start.label,
        loglik_path=np.asarray(ll_path),
    )
    return _sorted_fit(fit)


def multi_start(data: PanelDataset, bundle: DesignBundle, loss: LossConfig, k: int,
                controls: EmControls | None = None, d: int = 3, seed: int = 0,
                extra_starts: tuple[StartSpec, ...] = ()) -> MixtureFit:
    """Run every start and keep the best converged fit.

    Best means highest log-likelihood, ties broken by start order.  If no
    start converged the best non-converged fit is returned (flagged); only
    when every start raises is the aggregate failure raised.
    """
    starts = make_starts(data, bundle, loss, k, d=d, seed=seed, controls=controls)
    starts.extend(extra_starts)
    fits: list[tuple[int, MixtureFit]] = []
    errors: list[BaseException] = []
    for idx, s in enumerate(starts):
        try:
            fits.append((idx, em_fit(data, bundle, loss, k, controls=controls, start=s)))
        except NumericalError as exc:
            errors.append(exc)
    if not fits:
        raise MultiStartError(errors)
    pool = [(i, f) for i, f in fits if f.converged] or fits
    best = max(pool, key=lambda t: (t[1].loglik, -t[0]))
    return best[1]
