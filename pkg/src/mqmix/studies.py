"""Replicated simulation studies built on the generator and the estimator.

Each study maps a per-replicate task over derived seeds and reduces the
results in input order, so the output is identical for any worker count.
Replicate failures are recorded and skipped; a study only fails when every
replicate does.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .design import build_design
from .em import EmControls, em_fit, multi_start
from .errors import MqmixError
from .inference import sandwich
from .panel import complete_cases
from .selection import sweep
from .simulate import ENDOG_NAME, SimScenario, default_scenario, generate, score_fit

__all__ = [
    "pmap",
    "recovery_scenario",
    "endogeneity_scenario",
    "coverage_scenario",
    "selection_scenario",
    "mar_scenario",
    "run_recovery",
    "run_endogeneity",
    "run_coverage",
    "run_selection",
    "run_mar",
    "run_monotonicity",
]

_FAST = EmControls(epsilon=1e-6, max_iter=500)
# component-count decisions ride on BIC gaps of tens of points, so the
# selection study can stop the inner EM earlier than estimation-grade runs
_SELECT = EmControls(epsilon=1e-5, max_iter=300)


def pmap(fn, tasks, workers: int = 1) -> list:
    """Order-preserving map; a process pool when workers > 1."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------- scenarios

def recovery_scenario(seed: int = 0, replicate: int = 0, q: float = 0.5) -> SimScenario:
    return default_scenario(seed=seed, replicate=replicate, q=q)


def endogeneity_scenario(seed: int = 0, replicate: int = 0) -> SimScenario:
    """Two overlapping components with a strongly endogenous covariate, so a
    model without the mean columns takes a visible hit on the within slope."""
    return SimScenario(
        n=500, t=3, h=1, k=2, q=0.5,
        beta=((0.5, 1.0, -0.7, 0.4),),
        zeta=((-1.0,), (1.0,)),
        pi=(0.5, 0.5),
        sigma=(1.0,),
        rho_endo=0.6,
        between_sd=1.0,
        within_sd=1.0,
        seed=seed,
        replicate=replicate,
    )


def coverage_scenario(seed: int = 0, replicate: int = 0, q: float = 0.75,
                      n: int = 500) -> SimScenario:
    return SimScenario(
        n=n, t=3, h=1, k=2, q=q,
        beta=((0.5, 1.0, -0.7, 0.4),),
        zeta=((-2.0,), (2.0,)),
        pi=(0.4, 0.6),
        sigma=(1.0,),
        seed=seed,
        replicate=replicate,
    )


def selection_scenario(seed: int = 0, replicate: int = 0, n: int = 1000) -> SimScenario:
    return SimScenario(
        n=n, t=3, h=1, k=3, q=0.5,
        beta=((0.5, 1.0, -0.7, 0.4),),
        zeta=((-3.0,), (0.0,), (3.0,)),
        pi=(0.3, 0.4, 0.3),
        sigma=(1.0,),
        seed=seed,
        replicate=replicate,
    )


def mar_scenario(seed: int = 0, replicate: int = 0, n: int = 2000) -> SimScenario:
    return SimScenario(
        n=n, t=3, h=1, k=2, q=0.5,
        beta=((0.5, 1.0, -0.7, 0.4),),
        zeta=((-2.0,), (2.0,)),
        pi=(0.5, 0.5),
        sigma=(1.0,),
        dropout_intercept=-1.2,
        dropout_slope=0.8,
        seed=seed,
        replicate=replicate,
    )


# ------------------------------------------------------------------- tasks

def _fit_scenario(data, scenario, k, d, seed, mundlak=True, controls=None):
    bundle = build_design(data, scenario.roles(mundlak), mundlak=mundlak)
    fit = multi_start(data, bundle, scenario.loss, k, controls=controls or _FAST,
                      d=d, seed=seed)
    return bundle, fit


def _recovery_task(arg):
    scenario, d, seed = arg
    try:
        data, truth = generate(scenario)
        bundle, fit = _fit_scenario(data, scenario, scenario.k, d, seed)
        report = score_fit(fit, truth, bundle)
        return {
            "coef_err": {k: np.asarray(v) for k, v in report.coef_err.items()},
            "pi_err": report.pi_err,
            "zeta_err": report.zeta_err,
            "sigma_err": report.sigma_err,
            "ari": report.ari,
        }
    except MqmixError as exc:
        return {"failed": f"{type(exc).__name__}: {exc}"}


def run_recovery(reps: int, seed: int = 0, d: int = 1, workers: int = 1, q: float = 0.5):
    tasks = [(recovery_scenario(seed=seed, replicate=r, q=q), d, seed) for r in range(reps)]
    results = pmap(_recovery_task, tasks, workers)
    ok = [r for r in results if "failed" not in r]
    failures = [r["failed"] for r in results if "failed" in r]
    if not ok:
        raise MqmixError("every recovery replicate failed: " + "; ".join(failures[:3]))
    labels = sorted(ok[0]["coef_err"])
    coef = {lab: np.stack([r["coef_err"][lab] for r in ok]) for lab in labels}
    return {
        "coef_err": coef,  # label -> (reps, h)
        "pi_err": np.stack([r["pi_err"] for r in ok]),
        "zeta_err": np.stack([r["zeta_err"] for r in ok]),
        "sigma_err": np.stack([r["sigma_err"] for r in ok]),
        "ari": np.array([r["ari"] for r in ok]),
        "n_ok": len(ok),
        "failures": failures,
    }


def _endogeneity_task(arg):
    scenario, d, seed = arg
    try:
        data, truth = generate(scenario)
        _, fit_mund = _fit_scenario(data, scenario, scenario.k, d, seed, mundlak=True)
        _, fit_naive = _fit_scenario(data, scenario, scenario.k, d, seed, mundlak=False)
        bundle_m = build_design(data, scenario.roles(True), mundlak=True)
        bundle_n = build_design(data, scenario.roles(False), mundlak=False)
        j_m = bundle_m.labels.index(f"{ENDOG_NAME}_within")
        j_n = bundle_n.labels.index(ENDOG_NAME)
        true_b = truth.beta[0, 1]
        return {
            "mundlak_bias": float(fit_mund.beta[0, j_m] - true_b),
            "naive_bias": float(fit_naive.beta[0, j_n] - true_b),
        }
    except MqmixError as exc:
        return {"failed": f"{type(exc).__name__}: {exc}"}


def run_endogeneity(reps: int, seed: int = 0, d: int = 1, workers: int = 1):
    tasks = [(endogeneity_scenario(seed=seed, replicate=r), d, seed) for r in range(reps)]
    results = pmap(_endogeneity_task, tasks, workers)
    ok = [r for r in results if "failed" not in r]
    failures = [r["failed"] for r in results if "failed" in r]
    if not ok:
        raise MqmixError("every endogeneity replicate failed: " + "; ".join(failures[:3]))
    return {
        "mundlak_bias": np.array([r["mundlak_bias"] for r in ok]),
        "naive_bias": np.array([r["naive_bias"] for r in ok]),
        "n_ok": len(ok),
        "failures": failures,
    }


def _coverage_task(arg):
    scenario, d, seed = arg
    try:
        data, truth = generate(scenario)
        bundle, fit = _fit_scenario(data, scenario, scenario.k, d, seed)
        est = sandwich(fit, data, bundle)
        report = score_fit(fit, truth, bundle, est=est)
        return {
            "coef_err": {k: np.asarray(v) for k, v in report.coef_err.items()},
            "covered": {k: np.asarray(v, dtype=bool) for k, v in report.coverage.items()},
        }
    except MqmixError as exc:
        return {"failed": f"{type(exc).__name__}: {exc}"}


def run_coverage(reps: int, seed: int = 0, d: int = 1, workers: int = 1,
                 q: float = 0.75, n: int = 500):
    tasks = [(coverage_scenario(seed=seed, replicate=r, q=q, n=n), d, seed)
             for r in range(reps)]
    results = pmap(_coverage_task, tasks, workers)
    ok = [r for r in results if "failed" not in r]
    failures = [r["failed"] for r in results if "failed" in r]
    if not ok:
        raise MqmixError("every coverage replicate failed: " + "; ".join(failures[:3]))
    labels = sorted(ok[0]["covered"])
    covered = {lab: np.stack([r["covered"][lab] for r in ok]) for lab in labels}
    coverage = {lab: covered[lab].mean(axis=0) for lab in labels}
    coef = {lab: np.stack([r["coef_err"][lab] for r in ok]) for lab in labels}
    return {
        "coverage": coverage,  # label -> (h,) empirical coverage
        "covered": covered,  # label -> (n_ok, h) per-replicate interval hits
        "coef_err": coef,
        "status": ["ok" if "failed" not in r else r["failed"] for r in results],
        "n_ok": len(ok),
        "failures": failures,
    }


def _selection_task(arg):
    scenario, k_range, d, seed = arg
    try:
        data, _ = generate(scenario)
        bundle = build_design(data, scenario.roles(True), mundlak=True)
        report, _ = sweep(data, bundle, scenario.loss, k_range, controls=_SELECT,
                          d=d, seed=seed)
        return {"chosen_k": report.chosen_k}
    except MqmixError as exc:
        return {"failed": f"{type(exc).__name__}: {exc}"}


def run_selection(reps: int, seed: int = 0, d: int = 1, workers: int = 1,
                  k_range=range(1, 5), n: int = 1000):
    tasks = [(selection_scenario(seed=seed, replicate=r, n=n), k_range, d, seed)
             for r in range(reps)]
    results = pmap(_selection_task, tasks, workers)
    ok = [r for r in results if "failed" not in r]
    failures = [r["failed"] for r in results if "failed" in r]
    if not ok:
        raise MqmixError("every selection replicate failed: " + "; ".join(failures[:3]))
    return {
        "chosen_k": np.array([r["chosen_k"] for r in ok]),
        "n_ok": len(ok),
        "failures": failures,
    }


def _mar_task(arg):
    scenario, d, seed = arg
    try:
        data, truth = generate(scenario)
        bundle_full, fit_full = _fit_scenario(data, scenario, scenario.k, d, seed)
        complete = complete_cases(data, t_full=scenario.t)
        bundle_cc = build_design(complete, scenario.roles(True), mundlak=True)
        fit_cc = multi_start(complete, bundle_cc, scenario.loss, scenario.k,
                             controls=_FAST, d=d, seed=seed)
        out = {}
        for j, lab in enumerate(bundle_full.labels):
            out[f"full:{lab}"] = fit_full.beta[:, j].copy()
        for j, lab in enumerate(bundle_cc.labels):
            out[f"cc:{lab}"] = fit_cc.beta[:, j].copy()
        return out
    except MqmixError as exc:
        return {"failed": f"{type(exc).__name__}: {exc}"}


def run_mar(reps: int, seed: int = 0, d: int = 1, workers: int = 1, n: int = 2000):
    tasks = [(mar_scenario(seed=seed, replicate=r, n=n), d, seed) for r in range(reps)]
    results = pmap(_mar_task, tasks, workers)
    ok = [r for r in results if "failed" not in r]
    failures = [r["failed"] for r in results if "failed" in r]
    if not ok:
        raise MqmixError("every MAR replicate failed: " + "; ".join(failures[:3]))
    labels = sorted(lab[5:] for lab in ok[0] if lab.startswith("full:"))
    full = {lab: np.stack([r[f"full:{lab}"] for r in ok]) for lab in labels}
    cc = {lab: np.stack([r[f"cc:{lab}"] for r in ok]) for lab in labels}
    paired = {lab: full[lab] - cc[lab] for lab in labels}
    return {
        "paired_diff": paired,
        "full": full,
        "cc": cc,
        "n_ok": len(ok),
        "failures": failures,
    }


def _monotonicity_task(arg):
    scenario, k, seed = arg
    data, _ = generate(scenario)
    bundle = build_design(data, scenario.roles(True), mundlak=True)
    fit = em_fit(data, bundle, scenario.loss, k, controls=_FAST)
    path = fit.loglik_path
    increments = np.diff(path)
    floor = -1e-8 * np.abs(path[:-1])
    return {"violations": int(np.sum(increments < floor)), "iterations": fit.iterations}


def run_monotonicity(n_fits: int = 100, seed: int = 0, workers: int = 1, n: int = 200):
    qs = (0.5, 0.75, 0.9)
    ks = (1, 2, 3)
    tasks = []
    for r in range(n_fits):
        q = qs[r % len(qs)]
        k = ks[(r // len(qs)) % len(ks)]
        scenario = replace(
            SimScenario(
                n=n, t=3, h=1, k=3, q=q,
                beta=((0.5, 1.0, -0.7, 0.4),),
                zeta=((-2.0,), (0.0,), (2.0,)),
                pi=(0.3, 0.4, 0.3),
                sigma=(1.0,),
            ),
            seed=seed,
            replicate=r,
        )
        tasks.append((scenario, k, seed))
    results = pmap(_monotonicity_task, tasks, workers)
    return {
        "violations": int(sum(r["violations"] for r in results)),
        "n_fits": len(results),
        "iterations": np.array([r["iterations"] for r in results]),
    }
