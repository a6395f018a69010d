"""Whole-system checks.

Each test exercises one end-to-end guarantee of the estimator at a fixed
tolerance: density normalization, classical least-squares degeneracy, EM
monotonicity, Monte-Carlo parameter recovery, endogeneity correction,
interval coverage with derivative oracles, component-count selection,
affine equivariance, byte-level determinism of the command line, and
agreement between full-data and complete-case fits under covariate-driven
dropout.  Runtime ceilings are asserted where the guarantee includes one.

The replicated studies run on fixed seeds, so every run of this suite sees
the same numbers.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import integrate
from scipy.special import logsumexp

from mqmix.cli import main
from mqmix.design import CovariateRole, build_design
from mqmix.em import EmControls, component_logdensity_matrix, em_fit
from mqmix.inference import pack_params, sandwich, unit_scores, unpack_params
from mqmix.loss import AlidParams, LossConfig, alid_logpdf, alid_norm_const, rho
from mqmix.panel import PanelDataset
from mqmix.selection import KRecord, choose
from mqmix.studies import (
    run_coverage,
    run_endogeneity,
    run_mar,
    run_monotonicity,
    run_recovery,
    run_selection,
)

from util import make_panel, mixture_regression_panel

TIGHT = EmControls(epsilon=1e-12, max_iter=4000, inner_tol=1e-11, inner_max_iter=500)


def test_working_density_normalizes_and_matches_quadrature():
    started = time.monotonic()
    for q in (0.1, 0.5, 0.9):
        for c in (0.5, 1.345, 3.0):
            cfg = LossConfig(q=q, c=c)
            # exp(-rho) decays exponentially past the kinks; this span puts
            # the truncated tail mass far below the quadrature tolerance
            span = c + 45.0 / (2.0 * min(q, 1.0 - q) * c)
            base, err = integrate.quad(
                lambda t: np.exp(-rho(t, cfg)),
                -span,
                span,
                points=[-c, 0.0, c],
                limit=500,
                epsabs=1e-13,
                epsrel=1e-13,
            )
            assert err < 1e-11
            for sigma in (0.5, 1.0, 5.0):
                b = alid_norm_const(cfg, sigma)
                assert abs(b - sigma * base) <= 1e-10 * b

                params = AlidParams(loss=cfg, mu=0.3, sigma=sigma)
                total, terr = integrate.quad(
                    lambda y: np.exp(alid_logpdf(y, params)),
                    0.3 - sigma * span,
                    0.3 + sigma * span,
                    points=[0.3 - sigma * c, 0.3, 0.3 + sigma * c],
                    limit=500,
                    epsabs=1e-12,
                    epsrel=1e-12,
                )
                assert abs(total - 1.0) <= 1e-9
    assert time.monotonic() - started < 5.0


def test_huge_c_median_fit_reproduces_least_squares():
    started = time.monotonic()
    loss = LossConfig(q=0.5, c=1e6)
    controls = EmControls(epsilon=1e-13, max_iter=50, inner_tol=1e-12,
                          inner_max_iter=300)
    n, p = 200, 5
    cov_names = [f"x{j + 1}" for j in range(p)]
    roles = [CovariateRole(name, "fixed") for name in cov_names]
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        x = rng.normal(size=(n, p))
        coef = rng.normal(size=p)
        y = x @ coef + 0.5 + rng.normal(scale=1.2, size=n)
        rows = [(f"u{i}", 0, 0, float(y[i]), *x[i]) for i in range(n)]
        data = make_panel(rows, ["resp"], cov_names)
        bundle = build_design(data, roles)
        fit = em_fit(data, bundle, loss, k=1, controls=controls)

        design = np.column_stack([x, np.ones(n)])
        ols, *_ = np.linalg.lstsq(design, y, rcond=None)
        np.testing.assert_allclose(fit.beta[0], ols[:p], rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(fit.zeta[0, 0], ols[p], rtol=1e-8, atol=1e-8)
        resid = y - design @ ols
        sigma_mle = float(np.sqrt(np.mean(resid**2)))
        assert abs(fit.sigma[0] - sigma_mle) <= 1e-8
    assert time.monotonic() - started < 10.0


def test_em_loglik_never_decreases_across_seeded_fits():
    started = time.monotonic()
    res = run_monotonicity(n_fits=100, seed=0, workers=1, n=200)
    assert res["n_fits"] == 100
    assert res["violations"] == 0
    assert time.monotonic() - started < 300.0


def test_default_scenario_monte_carlo_recovery():
    started = time.monotonic()
    res = run_recovery(200, seed=0, d=1, workers=1, q=0.5)
    assert res["n_ok"] == 200

    for label, errs in res["coef_err"].items():
        for h in range(errs.shape[1]):
            col = errs[:, h]
            med_abs_bias = float(np.median(np.abs(col)))
            mc_se = float(col.std(ddof=1))
            assert med_abs_bias < 2.0 * mc_se, (label, h, med_abs_bias, mc_se)

    pi_med = np.median(res["pi_err"], axis=0)
    assert np.all(np.abs(pi_med) <= 0.05), pi_med

    assert float(np.median(res["ari"])) >= 0.8
    assert time.monotonic() - started < 1800.0


def test_mean_expansion_absorbs_endogeneity_bias():
    started = time.monotonic()
    res = run_endogeneity(100, seed=0, d=1, workers=1)
    assert res["n_ok"] == 100
    mund = np.abs(res["mundlak_bias"])
    naive = np.abs(res["naive_bias"])
    assert float(np.mean(mund < naive)) >= 0.90
    assert float(np.median(mund)) < float(np.median(naive)) / 3.0
    assert time.monotonic() - started < 1800.0


def _unit_logliks_at(data, bundle, fit, phi):
    params = unpack_params(phi, fit, bundle)
    logf = component_logdensity_matrix(data, bundle, params)
    with np.errstate(divide="ignore"):
        return logsumexp(np.log(params.pi)[None, :] + logf, axis=1)


def _small_fit(seed, n_units, q, sigma=0.9, t_len=2):
    rng = np.random.default_rng(seed)
    loss = LossConfig(q=q)
    data, bundle, _ = mixture_regression_panel(
        rng, n_units=n_units, t_len=t_len, beta=np.array([1.0]),
        zeta=np.array([-2.0, 2.0]), pi=np.array([0.5, 0.5]),
        sigma=sigma, loss=loss,
    )
    fit = em_fit(data, bundle, loss, k=2, controls=TIGHT)
    assert fit.converged
    return data, bundle, fit


def test_wald_intervals_cover_and_derivatives_match_oracles():
    started = time.monotonic()

    # replicated interval coverage
    res = run_coverage(200, seed=0, d=1, workers=1, q=0.75, n=500)
    assert res["n_ok"] == 200
    for label, cov in res["coverage"].items():
        for h in range(cov.shape[0]):
            assert 0.90 <= cov[h] <= 0.98, (label, h, cov[h])

    # analytic per-unit scores against central differences of the unit
    # log-likelihoods on ten small fitted instances
    for seed in range(10):
        q = (0.5, 0.75, 0.9)[seed % 3]
        data, bundle, fit = _small_fit(seed, n_units=14, q=q)
        phi = pack_params(fit, bundle)
        s = unit_scores(fit, data, bundle)
        fd = np.empty_like(s)
        for j in range(phi.shape[0]):
            h = 1e-6 * max(1.0, abs(float(phi[j])))
            hi, lo = phi.copy(), phi.copy()
            hi[j] += h
            lo[j] -= h
            fd[:, j] = (
                _unit_logliks_at(data, bundle, fit, hi)
                - _unit_logliks_at(data, bundle, fit, lo)
            ) / (2.0 * h)
        np.testing.assert_allclose(s, fd, atol=1e-6, rtol=1e-6)

    # curvature route: the responsibility-weighted information against a
    # four-point difference Hessian of the total log-likelihood
    from mqmix.inference import oakes_information

    data, bundle, fit = _small_fit(11, n_units=30, q=0.5, sigma=0.7)
    phi = pack_params(fit, bundle)
    total = phi.shape[0]

    params = fit.params
    for h in range(data.n_outcomes):
        rows = np.flatnonzero(bundle.out_idx == h)
        base = data.y[rows] - bundle.matrix[rows] @ params.beta[h]
        for k in range(fit.k):
            r = (base - params.zeta[k, h]) / params.sigma[h]
            gaps = np.min(np.abs(r[:, None] - np.array([-fit.c, 0.0, fit.c])), axis=1)
            assert gaps.min() > 5e-3  # difference stencil stays off the kinks

    steps = np.finfo(float).eps ** 0.25 * np.maximum(1.0, np.abs(phi))

    def total_ll(vec):
        return float(_unit_logliks_at(data, bundle, fit, vec).sum())

    fd_hess = np.empty((total, total))
    for a in range(total):
        for b in range(a, total):
            pp = phi.copy(); pp[a] += steps[a]; pp[b] += steps[b]
            pm = phi.copy(); pm[a] += steps[a]; pm[b] -= steps[b]
            mp = phi.copy(); mp[a] -= steps[a]; mp[b] += steps[b]
            mm = phi.copy(); mm[a] -= steps[a]; mm[b] -= steps[b]
            val = (total_ll(pp) - total_ll(pm) - total_ll(mp) + total_ll(mm)) / (
                4.0 * steps[a] * steps[b]
            )
            fd_hess[a, b] = fd_hess[b, a] = val

    j_mat = oakes_information(fit, data, bundle)
    rel = np.linalg.norm(j_mat - (-fd_hess)) / np.linalg.norm(fd_hess)
    assert rel < 1e-4

    assert time.monotonic() - started < 2700.0


def test_information_criterion_recovers_component_count():
    started = time.monotonic()
    res = run_selection(50, seed=0, d=1, workers=1, k_range=range(1, 5), n=1000)
    assert res["n_ok"] == 50
    rate = float(np.mean(res["chosen_k"] == 3))
    assert rate >= 0.90, rate

    # a fit with a vanishing component is excluded no matter how good its
    # criterion value is; admissibility uses the same mass rule the sweep does
    threshold = EmControls().min_mass
    sound = KRecord(k=2, loglik=-5000.0, n_params=9,
                    aic=10018.0, bic=10060.0,
                    admissible=0.40 >= threshold, min_mass=0.40, converged=True)
    spurious = KRecord(k=3, loglik=-4980.0, n_params=12,
                       aic=9984.0, bic=10040.0,
                       admissible=0.004 >= threshold, min_mass=0.004, converged=True)
    assert spurious.bic < sound.bic
    assert choose([sound, spurious], criterion="bic") == 2
    assert time.monotonic() - started < 1800.0


def test_affine_response_maps_translate_estimates_and_scale_errors():
    for trial in range(10):
        rng = np.random.default_rng(60 + trial)
        q = (0.5, 0.75, 0.9)[trial % 3]
        loss = LossConfig(q=q)
        data, bundle, _ = mixture_regression_panel(
            rng, n_units=130, t_len=3, beta=np.array([1.0, -0.5]),
            zeta=np.array([-2.5, 2.5]), pi=np.array([0.5, 0.5]),
            sigma=0.8, loss=loss,
        )
        fit1 = em_fit(data, bundle, loss, k=2, controls=TIGHT)
        est1 = sandwich(fit1, data, bundle)

        a = float(rng.uniform(0.5, 3.0))
        shift = rng.normal(size=bundle.n_columns)
        y2 = a * data.y + bundle.matrix @ shift
        data2 = PanelDataset(
            data.unit_ids, data.outcome_names, data.covariate_names,
            data.unit_idx, data.out_idx, data.occasion, y2, data.X,
        )
        bundle2 = build_design(
            data2, [CovariateRole(n, "fixed") for n in data.covariate_names]
        )
        fit2 = em_fit(data2, bundle2, loss, k=2, controls=TIGHT)
        est2 = sandwich(fit2, data2, bundle2)
        assert fit1.converged and fit2.converged

        np.testing.assert_allclose(fit2.beta, a * fit1.beta + shift,
                                   rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(fit2.zeta, a * fit1.zeta, rtol=1e-6)
        np.testing.assert_allclose(fit2.sigma, a * fit1.sigma, rtol=1e-6)

        p = bundle.n_columns
        n_scaled = p + fit1.k  # beta block then mass-point block, one outcome
        np.testing.assert_allclose(est2.se[:n_scaled], a * est1.se[:n_scaled],
                                   rtol=1e-6)


def test_cli_outputs_identical_for_one_and_eight_workers(tmp_path):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({
        "seed": 5,
        "scenario": {
            "n": 150, "t": 3, "h": 1, "k": 2,
            "beta": [[0.5, 1.0, -0.7, 0.4]],
            "zeta": [[-2.0], [2.0]],
            "pi": [0.5, 0.5],
            "sigma": [1.0],
        },
    }), encoding="utf-8")
    sim_out = tmp_path / "sim"
    assert main(["simulate", "--config", str(sim_cfg), "--out", str(sim_out)]) == 0

    fit_payload = {
        "data": str(sim_out / "panel.csv"),
        "roles": {
            "x_occ": "fixed", "x_end": "decomposed",
            "x_exo": "decomposed", "x_bin": "time_constant",
        },
        "q": [0.25, 0.5, 0.75],
        "k_min": 1, "k_max": 3, "d": 2, "seed": 5,
    }
    outs = {}
    for workers in (1, 8):
        cfg = tmp_path / f"fit{workers}.json"
        cfg.write_text(json.dumps(fit_payload), encoding="utf-8")
        out = tmp_path / f"fit_out_{workers}"
        code = main(["fit", "--config", str(cfg), "--workers", str(workers),
                     "--out", str(out)])
        assert code == 0
        outs[workers] = out
    names = sorted(p.name for p in outs[1].iterdir())
    assert names == sorted(p.name for p in outs[8].iterdir())
    for name in names:
        if name == "manifest.json":
            continue
        assert (outs[1] / name).read_bytes() == (outs[8] / name).read_bytes(), name
    manifests = []
    for workers in (1, 8):
        m = json.loads((outs[workers] / "manifest.json").read_text(encoding="utf-8"))
        m.pop("timing_seconds")
        m.pop("workers")
        manifests.append(m)
    assert manifests[0] == manifests[1]

    cov_outs = {}
    for workers in (1, 8):
        out = tmp_path / f"cov_out_{workers}"
        code = main(["coverage", "--q", "0.75", "--replicates", "8", "--d", "1",
                     "--seed", "6", "--workers", str(workers), "--out", str(out)])
        assert code == 0
        cov_outs[workers] = out
    for name in ("coverage_q0.75.csv", "replicates_q0.75.csv"):
        assert (cov_outs[1] / name).read_bytes() == (cov_outs[8] / name).read_bytes()


def test_full_and_complete_case_fits_agree_under_covariate_dropout():
    res = run_mar(20, seed=0, d=1, workers=1, n=2000)
    assert res["n_ok"] == 20
    reps = res["n_ok"]
    for label in res["full"]:
        full = res["full"][label]
        cc = res["cc"][label]
        for h in range(full.shape[1]):
            diff = float(full[:, h].mean() - cc[:, h].mean())
            joint_se = math.sqrt(
                full[:, h].var(ddof=1) + cc[:, h].var(ddof=1)
            ) / math.sqrt(reps)
            assert abs(diff) < 3.0 * joint_se, (label, h, diff, joint_se)
