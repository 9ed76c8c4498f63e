import numpy as np
import pytest

from chaindid.chain import fit_chained
from chaindid.summaries import (
    NonIdentifiedSummaryError,
    theta_calendar,
    theta_dynamic,
    theta_selective,
)

from conftest import make_balanced


@pytest.fixture
def fitted(rng):
    d = make_balanced(rng, n=3000, cohorts=(3, 5), effect=0.5)
    res = fit_chained(d)
    return d, [res.att(g, t) for (g, t) in res.targets]


def test_dynamic_recovers_event_profile(fitted):
    d, atts = fitted
    for e in range(2):
        s = theta_dynamic(atts, d, e=e)
        assert s.estimate == pytest.approx(0.5 * (e + 1), abs=0.15)
        assert abs(sum(s.weights.values()) - 1.0) < 1e-10
        assert abs(s.influence.mean()) < 1e-10


def test_dynamic_weights_are_cohort_shares(fitted):
    d, atts = fitted
    s = theta_dynamic(atts, d, e=0)
    n3 = np.sum(d.cohort == 3)
    n5 = np.sum(d.cohort == 5)
    assert s.weights[(3, 3)] == pytest.approx(n3 / (n3 + n5), abs=1e-12)


def test_dynamic_overall_averages_events(fitted):
    d, atts = fitted
    per = [theta_dynamic(atts, d, e=e).estimate for e in range(4)]  # e <= T - 3
    overall = theta_dynamic(atts, d)
    assert overall.estimate == pytest.approx(np.mean(per), abs=1e-12)
    started = theta_dynamic(atts, d, e_start=2)
    assert started.estimate == pytest.approx(np.mean(per[2:]), abs=1e-12)


def test_selective_per_cohort_and_overall(fitted):
    d, atts = fitted
    att = {(a.g, a.t): a.estimate for a in atts}
    per3 = theta_selective(atts, d, g=3)
    assert per3.estimate == pytest.approx(
        np.mean([att[(3, t)] for t in range(3, 7)]), abs=1e-12)
    overall = theta_selective(atts, d)
    assert abs(sum(overall.weights.values()) - 1.0) < 1e-10


def test_calendar_summary(fitted):
    d, atts = fitted
    att = {(a.g, a.t): a.estimate for a in atts}
    s = theta_calendar(atts, d, t=6)
    w3 = np.sum(d.cohort == 3) / np.sum(np.isin(d.cohort, (3, 5)))
    expect = w3 * att[(3, 6)] + (1 - w3) * att[(5, 6)]
    assert s.estimate == pytest.approx(expect, abs=1e-12)
    # before the second cohort starts only cohort 3 contributes
    s4 = theta_calendar(atts, d, t=4)
    assert s4.estimate == pytest.approx(att[(3, 4)], abs=1e-12)


def test_external_shares(fitted):
    d, atts = fitted
    s = theta_dynamic(atts, d, e=0, shares={3: 0.5, 5: 0.5})
    assert s.weights[(3, 3)] == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError, match="sum"):
        theta_dynamic(atts, d, e=0, shares={3: 0.4, 5: 0.4})


def test_estimated_share_influence_inflates_variance(fitted):
    """Estimated shares carry their own sampling noise in the influence."""
    d, atts = fitted
    est = theta_dynamic(atts, d, e=0)
    n3 = float(np.sum(d.cohort == 3))
    n5 = float(np.sum(d.cohort == 5))
    ext = theta_dynamic(atts, d, e=0, shares={3: n3 / (n3 + n5), 5: n5 / (n3 + n5)})
    assert est.estimate == pytest.approx(ext.estimate, abs=1e-12)
    assert est.influence.std() >= ext.influence.std() - 1e-9


def test_missing_cell_raises(fitted):
    d, atts = fitted
    partial = [a for a in atts if (a.g, a.t) != (5, 6)]
    with pytest.raises(NonIdentifiedSummaryError):
        theta_selective(partial, d, g=5)
