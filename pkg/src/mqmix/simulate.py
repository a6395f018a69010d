"""Synthetic panel generator and fit scoring.

Data are drawn from the exact model the estimator targets: each unit gets a
latent component, covariates with unit-level means (optionally correlated
with the component location, which is the endogeneity violation the Mundlak
columns correct), and responses equal to the linear predictor plus a scaled
draw from the working density.  Monotone dropout, when enabled, depends only
on the always-observed first-wave value of the endogenous covariate, so it is
missing-at-random by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit
from scipy.stats import norm
from sklearn.metrics import adjusted_rand_score

from .design import CovariateRole, DesignBundle
from .em import MixtureFit
from .errors import DomainError
from .inference import CovarianceEstimate
from .loss import AlidParams, LossConfig, alid_sample
from .panel import PanelDataset

__all__ = [
    "SimScenario",
    "TruthRecord",
    "default_scenario",
    "generate",
    "write_truth",
    "ScoreReport",
    "score_fit",
]

_Z975 = float(norm.ppf(0.975))

# covariate layout produced by the generator, in design-column order
FIXED_NAME = "x_occ"
ENDOG_NAME = "x_end"
EXOG_NAME = "x_exo"
CONST_NAME = "x_bin"


@dataclass(frozen=True)
class SimScenario:
    """Complete description of one synthetic-data experiment."""

    n: int = 500
    t: int = 3
    h: int = 2
    k: int = 3
    q: float = 0.5
    c: float = 1.345
    beta: tuple = ((0.5, 1.0, -0.7, 0.4), (-0.3, 0.6, 0.9, -0.5))
    zeta: tuple = ((-3.0, -2.0), (0.0, 0.0), (3.0, 2.0))
    pi: tuple = (0.3, 0.4, 0.3)
    sigma: tuple = (1.0, 0.8)
    lambda_between: tuple | None = None
    rho_endo: float = 0.0
    between_sd: float = 1.0
    within_sd: float = 1.0
    dropout_intercept: float | None = None
    dropout_slope: float = 0.0
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if self.n < 1 or self.t < 1:
            raise DomainError("n and t must be positive")
        if self.h not in (1, 2):
            raise DomainError("the generator supports one or two outcomes")
        beta = np.asarray(self.beta, dtype=float)
        zeta = np.asarray(self.zeta, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if beta.shape != (self.h, 4):
            raise DomainError("beta must have one row per outcome and four columns")
        if zeta.shape != (self.k, self.h):
            raise DomainError("zeta must be k rows by h columns")
        if pi.shape != (self.k,) or abs(pi.sum() - 1.0) > 1e-10 or np.any(pi < 0):
            raise DomainError("pi must be a probability vector of length k")
        if sigma.shape != (self.h,) or np.any(sigma <= 0):
            raise DomainError("sigma must be positive, one entry per outcome")
        if not abs(self.rho_endo) < 1.0:
            raise DomainError("rho_endo must lie strictly inside (-1, 1)")
        if self.between_sd <= 0 or self.within_sd < 0:
            raise DomainError("between_sd must be positive and within_sd nonnegative")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(q=self.q, c=self.c)

    def covariate_names(self) -> list[str]:
        return [FIXED_NAME, ENDOG_NAME, EXOG_NAME, CONST_NAME]

    def roles(self, mundlak: bool = True) -> list[CovariateRole]:
        kind = "decomposed" if mundlak else "fixed"
        return [
            CovariateRole(FIXED_NAME, "fixed"),
            CovariateRole(ENDOG_NAME, kind),
            CovariateRole(EXOG_NAME, kind),
            CovariateRole(CONST_NAME, "time_constant" if mundlak else "fixed"),
        ]


@dataclass
class TruthRecord:
    """Everything needed to score a fit against the generating process."""

    scenario: SimScenario
    components: np.ndarray  # (n,) latent component per unit
    beta: np.ndarray  # (h, 4) raw-covariate coefficients
    zeta: np.ndarray  # (k, h) sorted by first outcome
    pi: np.ndarray
    sigma: np.ndarray
    coef_truth: dict  # design-column label -> per-outcome true values
    endog_unit_mean: np.ndarray  # (n,) latent mean of the endogenous covariate

    def to_json(self) -> str:
        payload = {
            "scenario": asdict(self.scenario),
            "components": self.components.tolist(),
            "beta": self.beta.tolist(),
            "zeta": self.zeta.tolist(),
            "pi": self.pi.tolist(),
            "sigma": self.sigma.tolist(),
            "coef_truth": {k: list(v) for k, v in self.coef_truth.items()},
            "endog_unit_mean": self.endog_unit_mean.tolist(),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def write_truth(truth: TruthRecord, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(truth.to_json())
        fh.write("\n")


def default_scenario(**overrides) -> SimScenario:
    return SimScenario(**overrides)


def _standardized_locations(zeta: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """First-outcome locations centered and scaled under the mixing masses."""
    z0 = zeta[:, 0]
    mean = float(pi @ z0)
    var = float(pi @ (z0 - mean) ** 2)
    if var <= 0.0:
        return np.zeros_like(z0)
    return (z0 - mean) / np.sqrt(var)


def generate(scenario: SimScenario):
    """Draw one panel plus its truth record, deterministically in
    (seed, replicate)."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=scenario.seed, spawn_key=(scenario.replicate,))
    )
    n, t, h_count, k_count = scenario.n, scenario.t, scenario.h, scenario.k
    beta = np.asarray(scenario.beta, dtype=float)
    zeta = np.asarray(scenario.zeta, dtype=float)
    order = np.argsort(zeta[:, 0], kind="stable")
    zeta = zeta[order]
    pi = np.asarray(scenario.pi, dtype=float)[order]
    sigma = np.asarray(scenario.sigma, dtype=float)

    comps = rng.choice(k_count, size=n, p=pi)
    z_std = _standardized_locations(zeta, pi)
    rho = scenario.rho_endo
    endog_mean = scenario.between_sd * (
        rho * z_std[comps] + np.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    )
    exog_mean = scenario.between_sd * rng.standard_normal(n)
    const_cov = rng.integers(0, 2, size=n).astype(float)

    x_occ = rng.standard_normal((n, t))
    x_end = endog_mean[:, None] + scenario.within_sd * rng.standard_normal((n, t))
    x_exo = exog_mean[:, None] + scenario.within_sd * rng.standard_normal((n, t))

    lam = beta if scenario.lambda_between is None else np.asarray(scenario.lambda_between, dtype=float)
    # between-minus-within shift applies to the latent unit means
    shift = (lam[:, 1] - beta[:, 1])[None, :] * endog_mean[:, None] + (
        lam[:, 2] - beta[:, 2]
    )[None, :] * exog_mean[:, None]  # (n, h)

    noise = alid_sample(AlidParams(loss=scenario.loss), rng, n * t * h_count).reshape(n, t, h_count)

    observed = np.ones((n, t), dtype=bool)
    if scenario.dropout_intercept is not None:
        hazard_x = x_end[:, 0]
        for wave in range(1, t):
            p_drop = expit(scenario.dropout_intercept + scenario.dropout_slope * hazard_x)
            drop_now = rng.random(n) < p_drop
            observed[:, wave] = observed[:, wave - 1] & ~drop_now

    unit_ids = [f"u{i + 1:05d}" for i in range(n)]
    outcome_names = [f"y{h + 1}" for h in range(h_count)]
    unit_idx, out_idx, occasions, ys, xs = [], [], [], [], []
    for i in range(n):
        for wave in range(t):
            if not observed[i, wave]:
                continue
            row_x = (x_occ[i, wave], x_end[i, wave], x_exo[i, wave], const_cov[i])
            for h in range(h_count):
                mu = (
                    beta[h, 0] * row_x[0]
                    + beta[h, 1] * row_x[1]
                    + beta[h, 2] * row_x[2]
                    + beta[h, 3] * row_x[3]
                    + shift[i, h]
                    + zeta[comps[i], h]
                )
                unit_idx.append(i)
                out_idx.append(h)
                occasions.append(wave + 1)
                ys.append(mu + sigma[h] * noise[i, wave, h])
                xs.append(list(row_x))

    data = PanelDataset(
        unit_ids, outcome_names, scenario.covariate_names(),
        unit_idx, out_idx, occasions, ys, xs,
    )

    coef_truth = _coef_truth(scenario, beta, lam, zeta, pi)
    truth = TruthRecord(
        scenario=scenario,
        components=comps,
        beta=beta,
        zeta=zeta,
        pi=pi,
        sigma=sigma,
        coef_truth=coef_truth,
        endog_unit_mean=endog_mean,
    )
    return data, truth


def _coef_truth(scenario: SimScenario, beta, lam, zeta, pi) -> dict:
    """Map design-column labels to true values.

    Within, fixed, and time-constant columns carry beta exactly.  Between
    columns carry the population projection of the response's unit level on
    the unit covariate mean; with dropout the realized occasion counts vary,
    so the projection uses the full-panel count and is approximate in that
    case (exact whenever rho_endo = 0).
    """
    z_std = _standardized_locations(zeta, pi)
    var_mean = scenario.between_sd**2 + scenario.within_sd**2 / scenario.t
    out = {
        FIXED_NAME: beta[:, 0].tolist(),
        f"{ENDOG_NAME}_within": beta[:, 1].tolist(),
        f"{EXOG_NAME}_within": beta[:, 2].tolist(),
        CONST_NAME: beta[:, 3].tolist(),
        # raw labels used when the model is fitted without the decomposition;
        # the level truth is beta, which a naive fit misses under endogeneity
        ENDOG_NAME: beta[:, 1].tolist(),
        EXOG_NAME: beta[:, 2].tolist(),
    }
    endog_between, exog_between = [], []
    for h in range(scenario.h):
        cov_zeta = float(pi @ (zeta[:, h] * z_std)) * scenario.rho_endo * scenario.between_sd
        endog_between.append(lam[h, 1] + cov_zeta / var_mean)
        exog_between.append(lam[h, 2])
    out[f"{ENDOG_NAME}_between"] = endog_between
    out[f"{EXOG_NAME}_between"] = exog_between
    return out


@dataclass
class ScoreReport:
    """Per-fit errors against truth, with labels aligned to sorted locations."""

    coef_err: dict  # design label -> (h,) estimate minus truth
    zeta_err: np.ndarray  # (k_true, h), NaN where unmatched
    pi_err: np.ndarray
    sigma_err: np.ndarray
    ari: float
    matched_by_cost: bool
    coverage: dict | None  # design label -> (h,) bool, present when an
    # uncertainty estimate was supplied


def _align_components(fit_zeta: np.ndarray, true_zeta: np.ndarray):
    """Map fitted components onto true ones.

    Equal counts: positional (both orderings are sorted).  Unequal counts:
    cost-optimal matching on first-outcome locations, flagged.
    """
    k_fit, k_true = fit_zeta.shape[0], true_zeta.shape[0]
    if k_fit == k_true:
        return np.arange(k_true), np.arange(k_true), False
    cost = np.abs(fit_zeta[:, None, 0] - true_zeta[None, :, 0])
    rows, cols = linear_sum_assignment(cost)
    return rows, cols, True


def score_fit(fit: MixtureFit, truth: TruthRecord, bundle: DesignBundle,
              est: CovarianceEstimate | None = None) -> ScoreReport:
    coef_err = {}
    coverage = {} if est is not None else None
    h_count = len(bundle.outcome_names)
    for j, label in enumerate(bundle.labels):
        if label not in truth.coef_truth:
            continue
        target = np.asarray(truth.coef_truth[label], dtype=float)
        coef_err[label] = fit.beta[:, j] - target
        if est is not None:
            flags = []
            for h in range(h_count):
                pos = h * bundle.n_columns + j
                half = _Z975 * est.se[pos]
                flags.append(bool(abs(fit.beta[h, j] - target[h]) <= half))
            coverage[label] = flags

    # tolerate fits whose components arrive in arbitrary label order
    fit_order = np.argsort(fit.zeta[:, 0], kind="stable")
    z_fit = fit.zeta[fit_order]
    p_fit = fit.pi[fit_order]
    fit_rows, true_rows, flagged = _align_components(z_fit, truth.zeta)
    k_true = truth.zeta.shape[0]
    zeta_err = np.full((k_true, truth.zeta.shape[1]), np.nan)
    pi_err = np.full(k_true, np.nan)
    zeta_err[true_rows] = z_fit[fit_rows] - truth.zeta[true_rows]
    pi_err[true_rows] = p_fit[fit_rows] - truth.pi[true_rows]

    sigma_err = fit.sigma - truth.sigma
    ari = float(adjusted_rand_score(truth.components, fit.map_components()))
    return ScoreReport(
        coef_err=coef_err,
        zeta_err=zeta_err,
        pi_err=pi_err,
        sigma_err=sigma_err,
        ari=ari,
        matched_by_cost=flagged,
        coverage=coverage,
    )
