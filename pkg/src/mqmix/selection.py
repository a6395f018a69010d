"""Sweep over the number of mixture components and pick the reported model.

Each candidate K is fitted by multi-start EM.  Fits whose smallest mixing
mass falls below the admissibility threshold are excluded, and among the
admissible fits the one minimizing the information criterion (BIC by default,
with n = number of units in the penalty) is chosen.  When warm starting is on,
each K inherits an extra start built by splitting the largest component of the
previous solution, which keeps the best log-likelihood nondecreasing in K up
to a 1e-6 slack.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .design import DesignBundle
from .em import EmControls, MixtureFit, StartSpec, multi_start
from .errors import DomainError, MultiStartError, NoAdmissibleModelError
from .loss import LossConfig
from .panel import PanelDataset

__all__ = [
    "KRecord",
    "SelectionReport",
    "n_params",
    "split_start",
    "choose",
    "sweep",
]

_CRITERIA = ("bic", "aic")


def n_params(bundle: DesignBundle, k: int) -> int:
    """Coefficients per outcome, K locations per outcome, K-1 free masses,
    one scale per outcome."""
    h = bundle.n_outcomes
    return bundle.n_columns * h + k * h + (k - 1) + h


@dataclass(frozen=True)
class KRecord:
    k: int
    loglik: float
    n_params: int
    aic: float
    bic: float
    admissible: bool
    min_mass: float
    converged: bool
    note: str = ""


@dataclass
class SelectionReport:
    records: list[KRecord]
    chosen_k: int | None
    criterion: str
    min_mass_threshold: float

    def record_for(self, k: int) -> KRecord:
        for rec in self.records:
            if rec.k == k:
                return rec
        raise KeyError(f"no record for K={k}")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("k,loglik,n_params,aic,bic,admissible,min_mass,converged,chosen\n")
        for rec in self.records:
            buf.write(
                f"{rec.k},{rec.loglik:.6f},{rec.n_params},{rec.aic:.6f},"
                f"{rec.bic:.6f},{int(rec.admissible)},{rec.min_mass:.6f},"
                f"{int(rec.converged)},{int(rec.k == self.chosen_k)}\n"
            )
        return buf.getvalue()

    def format_table(self) -> str:
        lines = [
            f"model selection by {self.criterion.upper()} "
            f"(mass threshold {self.min_mass_threshold:g})",
            f"{'K':>3} {'loglik':>14} {'params':>7} {'AIC':>14} {'BIC':>14} "
            f"{'min mass':>9} {'admissible':>10}",
        ]
        for rec in self.records:
            mark = " *" if rec.k == self.chosen_k else "  "
            lines.append(
                f"{rec.k:>3} {rec.loglik:>14.3f} {rec.n_params:>7} "
                f"{rec.aic:>14.3f} {rec.bic:>14.3f} {rec.min_mass:>9.3f} "
                f"{'yes' if rec.admissible else 'no':>10}{mark}"
            )
        return "\n".join(lines) + "\n"


def split_start(fit, label: str = "warm-split") -> StartSpec:
    """Start for K+1 components: halve the largest mass and duplicate its
    location with a tiny offset so the likelihood floor is preserved."""
    j = int(np.argmax(fit.pi))
    pi = np.append(fit.pi, fit.pi[j] / 2.0)
    pi[j] /= 2.0
    zeta = np.vstack([fit.zeta, fit.zeta[j] + 1e-6 * fit.sigma])
    return StartSpec(pi=pi, beta=fit.beta.copy(), zeta=zeta,
                     sigma=fit.sigma.copy(), label=label)


def choose(records: list[KRecord], criterion: str = "bic") -> int | None:
    """Smallest criterion value among admissible records; ties favor fewer
    components.  None when nothing is admissible."""
    if criterion not in _CRITERIA:
        raise DomainError(f"criterion must be one of {_CRITERIA}")
    best = None
    for rec in records:
        if not rec.admissible or not math.isfinite(rec.loglik):
            continue
        value = rec.bic if criterion == "bic" else rec.aic
        if best is None or value < best[0] or (value == best[0] and rec.k < best[1]):
            best = (value, rec.k)
    return None if best is None else best[1]


def sweep(data: PanelDataset, bundle: DesignBundle, loss: LossConfig, k_range,
          controls: EmControls | None = None, d: int = 3, seed: int = 0,
          warm_start: bool = True, criterion: str = "bic"):
    """Fit every K in k_range and return (SelectionReport, chosen MixtureFit)."""
    controls = controls or EmControls()
    if criterion not in _CRITERIA:
        raise DomainError(f"criterion must be one of {_CRITERIA}")
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise DomainError("k_range must be nonempty")
    if ks[0] < 1:
        raise DomainError("every K must be at least 1")

    n = data.n_units
    records: list[KRecord] = []
    fits: dict[int, MixtureFit] = {}
    prev_fit: MixtureFit | None = None

    for k in ks:
        extras: list[StartSpec] = []
        if warm_start and prev_fit is not None:
            grown = _FitShell(prev_fit.pi, prev_fit.beta, prev_fit.zeta, prev_fit.sigma)
            while grown.pi.shape[0] < k:
                spec = split_start(grown)
                grown = _FitShell(spec.pi, spec.beta, spec.zeta, spec.sigma)
            extras = [StartSpec(pi=grown.pi, beta=grown.beta, zeta=grown.zeta,
                                sigma=grown.sigma, label="warm-split")]
        try:
            fit = multi_start(data, bundle, loss, k, controls=controls, d=d,
                              seed=seed, extra_starts=tuple(extras))
        except MultiStartError as exc:
            records.append(KRecord(k=k, loglik=float("nan"), n_params=n_params(bundle, k),
                                   aic=float("nan"), bic=float("nan"), admissible=False,
                                   min_mass=float("nan"), converged=False,
                                   note=f"all starts failed: {exc}"))
            continue
        fits[k] = fit
        prev_fit = fit
        p_k = n_params(bundle, k)
        min_mass = float(fit.pi.min())
        records.append(KRecord(
            k=k,
            loglik=fit.loglik,
            n_params=p_k,
            aic=-2.0 * fit.loglik + 2.0 * p_k,
            bic=-2.0 * fit.loglik + p_k * math.log(n),
            admissible=min_mass >= controls.min_mass,
            min_mass=min_mass,
            converged=fit.converged,
        ))

    chosen = choose(records, criterion)
    report = SelectionReport(records=records, chosen_k=chosen, criterion=criterion,
                             min_mass_threshold=controls.min_mass)
    if chosen is None:
        lines = [
            f"K={r.k}: loglik={r.loglik:.3f}, min mass={r.min_mass:.4f}, "
            f"converged={r.converged}" + (f" ({r.note})" if r.note else "")
            for r in records
        ]
        raise NoAdmissibleModelError(
            "no admissible model in the K range; per-K diagnostics:\n  " + "\n  ".join(lines)
        )
    return report, fits[chosen]


class _FitShell:
    """Minimal stand-in so repeated splits can chain without refitting."""

    def __init__(self, pi, beta, zeta, sigma):
        self.pi = pi
        self.beta = beta
        self.zeta = zeta
        self.sigma = sigma
