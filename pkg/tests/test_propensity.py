import math

import numpy as np
import pytest

from chaindid.panel import PanelDataset
from chaindid.propensity import (
    DegenerateModelError,
    fit_group_propensity,
    fit_link,
    fit_sampling_model,
    propensity_influence,
    sampling_qhat,
)

LOG3 = math.log(3.0)


def test_logit_two_group_mle():
    # x=0: 3/12 successes -> logit -log 3; x=1: 9/12 -> +log 3
    x = np.repeat([0.0, 1.0], 12)
    y = np.zeros(24)
    y[:3] = 1.0
    y[12:21] = 1.0
    X = np.column_stack([np.ones(24), x])
    m = fit_link(X, y)
    assert m.coefficients[0] == pytest.approx(-LOG3, abs=1e-8)
    assert m.coefficients[1] == pytest.approx(2 * LOG3, abs=1e-8)
    assert m.converged and not m.ridge_used


def test_score_identity():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(500), rng.normal(size=(500, 2))])
    y = (rng.random(500) < 1 / (1 + np.exp(-X @ [0.2, 0.8, -0.5]))).astype(float)
    m = fit_link(X, y)
    p, _ = m.predict(X)
    score = X.T @ (y - p) / len(y)
    assert np.max(np.abs(score)) < 1e-6


def test_probit_runs():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(400), rng.normal(size=400)])
    y = (rng.random(400) < 0.5).astype(float)
    m = fit_link(X, y, link="probit")
    assert m.converged


def test_separation_triggers_ridge():
    x = np.linspace(-2, 2, 40)
    y = (x > 0).astype(float)
    m = fit_link(np.column_stack([np.ones(40), x]), y)
    assert m.ridge_used
    assert np.all(np.isfinite(m.coefficients))


def test_constant_labels_degenerate():
    X = np.ones((10, 1))
    with pytest.raises(DegenerateModelError):
        fit_link(X, np.ones(10))


def _panel_no_x(cohort, T=3, y=None, n=None):
    cohort = np.asarray(cohort, dtype=np.int64)
    n = len(cohort)
    if y is None:
        y = np.zeros((n, T))
    return PanelDataset(tuple(f"u{i}" for i in range(n)), y,
                        np.ones((n, T), dtype=bool), cohort)


def test_no_covariates_exact_proportion():
    d = _panel_no_x([2, 2, 2, 0, 0, 0, 0, 0, 0, 0])
    f = fit_group_propensity(d, 2)
    assert f.model is None
    assert np.all(np.abs(f.fitted[f.estimation_subset] - 0.3) < 1e-12)


def test_propensity_subset_excludes_other_cohorts():
    d = _panel_no_x([2, 2, 3, 0, 0, 0])
    f = fit_group_propensity(d, 2)
    # cohort 3 is neither treated-at-2 nor a never-treated control
    assert not f.estimation_subset[2]
    assert f.fitted[f.estimation_subset] == pytest.approx(0.4)


def test_not_yet_treated_pool_grows_backwards():
    d = _panel_no_x([2, 2, 3, 0, 0, 0], T=3)
    early = fit_group_propensity(d, 2, "not-yet-treated", t=2)
    late = fit_group_propensity(d, 2, "not-yet-treated", t=3)
    assert early.estimation_subset[2] and not late.estimation_subset[2]


def test_propensity_influence_sandwich():
    """Influence-based variance of the logit coefficients tracks a direct MC."""
    beta = np.array([-0.3, 0.9])
    reps, n = 400, 2000
    rng = np.random.default_rng(11)
    coefs = np.empty((reps, 2))
    infl_var = np.empty((reps, 2))
    for r in range(reps):
        x = rng.normal(size=n)
        p = 1 / (1 + np.exp(-(beta[0] + beta[1] * x)))
        treat = rng.random(n) < p
        d = PanelDataset(tuple(range(n)), np.zeros((n, 2)), np.ones((n, 2), bool),
                         np.where(treat, 2, 0).astype(np.int64), covariates=x[:, None])
        f = fit_group_propensity(d, 2)
        coefs[r] = f.model.coefficients
        xi = propensity_influence(f, d)  # (n, k+1), one row per unit
        infl_var[r] = np.var(xi, axis=0) / n
    mc_var = np.var(coefs, axis=0, ddof=1)
    assert np.all(np.abs(infl_var.mean(axis=0) / mc_var - 1.0) < 0.15)


def test_sampling_qhat_mar_x():
    rng = np.random.default_rng(8)
    n, T = 3000, 3
    x = rng.normal(1.0, 1.0, n)
    q = 1 / (1 + np.exp(-(0.3 + 0.5 * x)))
    s = rng.random(n) < q
    sampled = np.ones((n, T), dtype=bool)
    sampled[:, 1] = s
    sampled[:, 2] = s
    y = np.where(sampled, rng.normal(size=(n, T)), np.nan)
    d = PanelDataset(tuple(range(n)), y, sampled,
                     np.where(rng.random(n) < 0.4, 2, 0).astype(np.int64),
                     covariates=x[:, None], covariate_names=("x1",))
    sf = fit_sampling_model(d, "mar-x", features=("x1",))
    members = np.ones(n, dtype=bool)
    qhat = sampling_qhat(sf, d, ("G", 2), members, 3, 1)
    assert np.corrcoef(qhat, q)[0, 1] > 0.99
    assert np.max(np.abs(qhat - q)) < 0.1


def test_sampling_degenerate_falls_back_to_one():
    d = _panel_no_x([2, 2, 0, 0], T=3)
    sf = fit_sampling_model(d, "mar-x")
    qhat = sampling_qhat(sf, d, ("G", 2), np.ones(4, bool), 3, 1)
    np.testing.assert_allclose(qhat, 1.0)
    assert sf.fallbacks
