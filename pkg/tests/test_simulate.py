"""Generator properties: determinism, the endogeneity mechanism, dropout
behavior, distributional identities at the truth, and fit scoring."""

import json

import numpy as np
import pytest
from scipy import stats

from mqmix.em import MixtureFit
from mqmix.errors import DomainError
from mqmix.loss import psi
from mqmix.simulate import (
    ENDOG_NAME,
    SimScenario,
    default_scenario,
    generate,
    score_fit,
    write_truth,
)
from mqmix.design import build_design


def true_residuals(data, truth):
    """(y - mu_true) / sigma_true for every row."""
    x = data.X
    mu = np.empty(data.n_rows)
    for r in range(data.n_rows):
        h = data.out_idx[r]
        i = data.unit_idx[r]
        mu[r] = truth.beta[h] @ x[r] + truth.zeta[truth.components[i], h]
    sig = truth.sigma[data.out_idx]
    return (data.y - mu) / sig


def perfect_fit(truth, data, bundle):
    n = data.n_units
    resp = np.zeros((n, truth.pi.shape[0]))
    resp[np.arange(n), truth.components] = 1.0
    beta = np.zeros((truth.beta.shape[0], bundle.n_columns))
    for j, lab in enumerate(bundle.labels):
        beta[:, j] = truth.coef_truth[lab]
    return MixtureFit(
        q=truth.scenario.q, c=truth.scenario.c, beta=beta, zeta=truth.zeta.copy(),
        pi=truth.pi.copy(), sigma=truth.sigma.copy(), loglik=0.0,
        responsibilities=resp, iterations=0, converged=True, seed="truth",
        loglik_path=np.array([0.0]),
    )


def test_generation_is_deterministic_in_seed_and_replicate():
    scn = default_scenario(n=40, seed=7, replicate=2)
    d1, t1 = generate(scn)
    d2, t2 = generate(scn)
    assert d1 == d2
    np.testing.assert_array_equal(t1.components, t2.components)

    d3, _ = generate(default_scenario(n=40, seed=7, replicate=3))
    assert not np.array_equal(d1.y, d3.y)


def test_default_scenario_shape():
    data, truth = generate(default_scenario(n=120, seed=1))
    assert data.n_units == 120
    assert data.n_outcomes == 2
    assert data.n_rows == 120 * 3 * 2
    assert data.covariate_names == ["x_occ", "x_end", "x_exo", "x_bin"]
    assert sorted(set(truth.components)) == [0, 1, 2]
    # locations arrive sorted by the first outcome
    assert np.all(np.diff(truth.zeta[:, 0]) > 0)


def test_point_mass_puts_every_unit_in_one_component():
    scn = default_scenario(n=60, pi=(0.0, 1.0, 0.0), seed=3)
    _, truth = generate(scn)
    assert set(truth.components) == {1}


def test_estimating_equation_holds_at_truth():
    for q in (0.5, 0.75):
        scn = default_scenario(n=8000, t=1, h=1,
                               beta=((0.5, 1.0, -0.7, 0.4),),
                               zeta=((-1.0,), (0.0,), (1.0,)),
                               sigma=(1.3,), q=q, seed=11)
        data, truth = generate(scn)
        r = true_residuals(data, truth)
        vals = psi(r, scn.loss)
        n = vals.shape[0]
        assert abs(vals.mean()) < 4.0 * vals.std() / np.sqrt(n)


def test_endogeneity_correlation_matches_target():
    scn = default_scenario(n=100_000, rho_endo=0.6, seed=5)
    data, truth = generate(scn)
    z_units = truth.zeta[truth.components, 0]
    r_latent = np.corrcoef(truth.endog_unit_mean, z_units)[0, 1]
    assert abs(r_latent - 0.6) < 0.05

    # observed unit means attenuate by the within-noise share
    x_end = data.X[:, data.covariate_names.index(ENDOG_NAME)]
    sums = np.zeros(data.n_units)
    counts = np.zeros(data.n_units)
    first = data.out_idx == 0
    np.add.at(sums, data.unit_idx[first], x_end[first])
    np.add.at(counts, data.unit_idx[first], 1.0)
    xbar = sums / counts
    target = 0.6 * scn.between_sd / np.hypot(scn.between_sd, scn.within_sd / np.sqrt(scn.t))
    assert abs(np.corrcoef(xbar, z_units)[0, 1] - target) < 0.05

    zero = default_scenario(n=100_000, rho_endo=0.0, seed=5)
    _, truth0 = generate(zero)
    r0 = np.corrcoef(truth0.endog_unit_mean, truth0.zeta[truth0.components, 0])[0, 1]
    assert abs(r0) < 0.05


def test_gaussian_limit_residuals_pass_normality():
    scn = default_scenario(n=3000, t=2, h=1, q=0.5, c=1e6,
                           beta=((0.5, 1.0, -0.7, 0.4),),
                           zeta=((-2.0,), (0.0,), (2.0,)), sigma=(1.0,), seed=9)
    data, truth = generate(scn)
    r = true_residuals(data, truth)
    assert stats.kstest(r, "norm").pvalue > 0.01


def test_dropout_is_monotone_and_covariate_driven():
    scn = default_scenario(n=4000, dropout_intercept=-1.0, dropout_slope=1.5, seed=13)
    data, truth = generate(scn)

    waves = {}
    for i, occ in zip(data.unit_idx, data.occasion):
        waves.setdefault(int(i), set()).add(int(occ))
    base_x = np.empty(data.n_units)
    first_wave_rows = (data.occasion == 1) & (data.out_idx == 0)
    base_x[data.unit_idx[first_wave_rows]] = data.X[
        first_wave_rows, data.covariate_names.index(ENDOG_NAME)
    ]
    n_waves = np.zeros(data.n_units)
    for i, seen in waves.items():
        assert 1 in seen
        assert seen == set(range(1, max(seen) + 1))
        n_waves[i] = len(seen)
    assert n_waves.min() == 1 and n_waves.max() == 3

    hi = n_waves[base_x > 0].mean()
    lo = n_waves[base_x <= 0].mean()
    assert lo - hi > 0.3  # positive slope means high covariate drops earlier


def test_dropout_ignores_unrealized_responses():
    a = default_scenario(n=500, dropout_intercept=-0.5, dropout_slope=1.0,
                         sigma=(1.0, 0.8), seed=21)
    b = default_scenario(n=500, dropout_intercept=-0.5, dropout_slope=1.0,
                         sigma=(3.0, 2.4), seed=21)
    da, _ = generate(a)
    db, _ = generate(b)
    np.testing.assert_array_equal(da.unit_idx, db.unit_idx)
    np.testing.assert_array_equal(da.occasion, db.occasion)
    assert not np.allclose(da.y, db.y)


def test_truth_record_roundtrips_through_json(tmp_path):
    data, truth = generate(default_scenario(n=25, seed=2, rho_endo=0.3))
    path = tmp_path / "truth.json"
    write_truth(truth, path)
    loaded = json.loads(path.read_text())
    assert loaded["scenario"]["n"] == 25
    assert len(loaded["components"]) == 25
    np.testing.assert_allclose(loaded["zeta"], truth.zeta)
    assert set(loaded["coef_truth"]) >= {
        "x_occ", "x_end_within", "x_end_between", "x_exo_within",
        "x_exo_between", "x_bin", "x_end", "x_exo",
    }


def test_perfect_fit_scores_zero_bias_and_unit_ari():
    data, truth = generate(default_scenario(n=80, seed=6))
    bundle = build_design(data, truth.scenario.roles())
    fit = perfect_fit(truth, data, bundle)
    report = score_fit(fit, truth, bundle)
    for label, err in report.coef_err.items():
        np.testing.assert_allclose(err, 0.0, atol=1e-12, err_msg=label)
    np.testing.assert_allclose(report.zeta_err, 0.0, atol=1e-12)
    np.testing.assert_allclose(report.pi_err, 0.0, atol=1e-12)
    np.testing.assert_allclose(report.sigma_err, 0.0, atol=1e-12)
    assert report.ari == pytest.approx(1.0)
    assert not report.matched_by_cost
    assert report.coverage is None


def test_permuted_labels_still_score_zero_after_alignment():
    data, truth = generate(default_scenario(n=80, seed=6))
    bundle = build_design(data, truth.scenario.roles())
    fit = perfect_fit(truth, data, bundle)
    perm = np.array([2, 0, 1])
    fit.zeta = fit.zeta[perm]
    fit.pi = fit.pi[perm]
    fit.responsibilities = fit.responsibilities[:, perm]
    report = score_fit(fit, truth, bundle)
    np.testing.assert_allclose(report.zeta_err, 0.0, atol=1e-12)
    np.testing.assert_allclose(report.pi_err, 0.0, atol=1e-12)
    assert report.ari == pytest.approx(1.0)


def test_component_count_mismatch_is_flagged():
    data, truth = generate(default_scenario(n=60, seed=4))
    bundle = build_design(data, truth.scenario.roles())
    fit = perfect_fit(truth, data, bundle)
    fit.zeta = fit.zeta[:2]
    fit.pi = np.array([0.5, 0.5])
    fit.responsibilities = fit.responsibilities[:, :2]
    fit.responsibilities /= np.maximum(fit.responsibilities.sum(axis=1, keepdims=True), 1e-12)
    report = score_fit(fit, truth, bundle)
    assert report.matched_by_cost
    assert np.isnan(report.zeta_err).sum() == truth.zeta.shape[1]


def test_scenario_validation():
    with pytest.raises(DomainError):
        default_scenario(n=0)
    with pytest.raises(DomainError):
        default_scenario(pi=(0.5, 0.5, 0.5))
    with pytest.raises(DomainError):
        default_scenario(rho_endo=1.0)
    with pytest.raises(DomainError):
        default_scenario(sigma=(1.0, -2.0))
    with pytest.raises(DomainError):
        default_scenario(zeta=((0.0, 0.0),))
    with pytest.raises(DomainError):
        SimScenario(h=3)
