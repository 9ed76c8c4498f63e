import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaindid.panel import PanelDataset, PanelError, load_panel

CSV_GOOD = """unit,period,y,cohort,x1
a,1,1.0,0,0.3
a,2,1.5,0,0.3
b,1,2.0,3,-1.1
b,2,2.2,3,-1.1
b,3,4.0,3,-1.1
c,2,0.5,0,0.0
c,3,0.7,0,0.0
"""


def test_load_basic():
    d = load_panel(io.StringIO(CSV_GOOD))
    assert d.n == 3 and d.T == 3
    assert d.units == ("a", "b", "c")
    assert list(d.cohort) == [0, 3, 0]
    assert np.isnan(d.y[0, 2]) and d.y[1, 2] == 4.0
    assert d.covariates.shape == (3, 1)


def test_load_period_relabeling():
    csv = CSV_GOOD.replace("1,", "2007,").replace("2,", "2008,").replace("3,", "2009,")
    d = load_panel(io.StringIO(csv))
    assert d.T == 3
    assert d.original_period(1) == 2007


def test_duplicate_row_rejected():
    with pytest.raises(PanelError, match="duplicate"):
        load_panel(io.StringIO("unit,period,y,cohort\na,1,1.0,0\na,1,1.5,0\n"))


def test_conflicting_cohort_rejected():
    with pytest.raises(PanelError, match="cohort"):
        load_panel(io.StringIO("unit,period,y,cohort\na,1,1.0,2\na,2,1.5,3\n"))


def test_bad_number_reports_line():
    with pytest.raises(PanelError, match="line 2"):
        load_panel(io.StringIO("unit,period,y,cohort\na,1,oops,0\n"))


def test_schema_mapping():
    csv = "id,year,outcome,first_treat\nu1,1,0.5,0\nu1,2,0.6,0\nu2,1,1.0,2\nu2,2,3.0,2\n"
    d = load_panel(io.StringIO(csv),
                   schema={"unit": "id", "period": "year", "y": "outcome",
                           "cohort": "first_treat"})
    assert d.n == 2 and d.T == 2


def test_validation_report_codes():
    y = np.array([[1.0, 2.0], [1.5, np.nan]])
    d = PanelDataset(("a", "b"), y, ~np.isnan(y), np.array([2, 2], dtype=np.int64))
    rep = d.validate()
    assert any(i.code == "NO_NEVER_TREATED" for i in rep.warnings)
    assert any(i.code.startswith("MISSING_CONTROL_PAIR") for i in rep.errors)
    assert not rep.ok


def test_single_observation_warning():
    y = np.array([[1.0, 2.0, 3.0], [np.nan, 1.5, np.nan], [0.5, 0.1, 0.2]])
    d = PanelDataset(("a", "b", "c"), y, ~np.isnan(y),
                     np.array([2, 0, 0], dtype=np.int64))
    rep = d.validate()
    assert any(i.code == "SINGLE_OBSERVATION" for i in rep.warnings)


def test_roundtrip_exact():
    d = load_panel(io.StringIO(CSV_GOOD))
    buf = io.StringIO()
    d.to_csv(buf)
    d2 = load_panel(io.StringIO(buf.getvalue()))
    assert d.equals(d2)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=20), st.integers(min_value=2, max_value=6),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_roundtrip_random(n, T, seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, T)) * np.exp(rng.normal(size=(n, T)) * 4)
    sampled = rng.random((n, T)) < 0.8
    sampled[~sampled.any(axis=1), 0] = True
    sampled[0, :] = True  # keep the period axis intact on reload
    coh = np.where(rng.random(n) < 0.5, 0, rng.integers(2, T + 1, size=n))
    d = PanelDataset(tuple(f"u{i}" for i in range(n)), np.where(sampled, y, np.nan),
                     sampled, coh.astype(np.int64))
    buf = io.StringIO()
    d.to_csv(buf)
    assert d.equals(load_panel(io.StringIO(buf.getvalue())))


def test_arrays_readonly():
    d = load_panel(io.StringIO(CSV_GOOD))
    with pytest.raises(ValueError):
        d.y[0, 0] = 9.9


def test_observation_masks():
    d = load_panel(io.StringIO(CSV_GOOD))
    np.testing.assert_array_equal(d.observation_mask(2), [True, True, False])
    np.testing.assert_array_equal(d.single_period_mask(3), [False, True, True])
    np.testing.assert_array_equal(d.never_treated(), [True, False, True])
    np.testing.assert_array_equal(d.not_yet_treated(2), [True, True, True])
    np.testing.assert_array_equal(d.not_yet_treated(3), [True, False, True])
