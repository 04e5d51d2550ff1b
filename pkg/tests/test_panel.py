import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from panelcausal.errors import ConfigError, DataError
from panelcausal.panel import (
    PanelDataset, ScreeningConfig, VariableDef, clean, debt_cost_ratio, impute_group_mean,
    lead_lag, load_panel, screen, winsorize,
)


def write_csv(tmp_path, text, name="p.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def frame(n=10, **cols):
    base = {"firm_id": np.arange(1, n + 1), "year": np.full(n, 2015),
            "industry": ["C01"] * n, "province": ["P01"] * n}
    base.update(cols)
    return PanelDataset(pd.DataFrame(base))


# -- loading ------------------------------------------------------------------

def test_load_three_rows(tmp_path):
    p = write_csv(tmp_path, "firm_id,year,industry,province,x\n1,2015,C01,P01,1.5\n"
                            "1,2016,C01,P01,2\n2,2015,C02,P01,3\n")
    d = load_panel(p)
    assert d.n_rows == 3
    np.testing.assert_array_equal(d.column("x"), [1.5, 2.0, 3.0])


def test_load_rejects_duplicate_key(tmp_path):
    p = write_csv(tmp_path, "firm_id,year,industry,province,x\n1,2015,C01,P01,1\n"
                            "1,2015,C01,P01,2\n")
    with pytest.raises(DataError, match="duplicate"):
        load_panel(p)


def test_load_na_marker_keeps_row(tmp_path):
    p = write_csv(tmp_path, "firm_id,year,industry,province,Lev\n1,2015,C01,P01,NA\n"
                            "2,2015,C01,P01,\n3,2015,C01,P01,0.4\n")
    d = load_panel(p, [VariableDef("Lev")])
    assert d.n_rows == 3
    assert np.isnan(d.column("Lev")[:2]).all() and d.column("Lev")[2] == 0.4


def test_load_errors(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_panel(tmp_path / "missing.csv")
    p = write_csv(tmp_path, "firm_id,year,industry,province,x\n1,2015,C01,P01,abc\n")
    with pytest.raises(DataError, match="x"):
        load_panel(p)
    with pytest.raises(DataError, match="header mismatch"):
        load_panel(p, [VariableDef("y")])


def test_log1p_needs_non_negative(tmp_path):
    p = write_csv(tmp_path, "firm_id,year,industry,province,x\n1,2015,C01,P01,-1\n")
    with pytest.raises(DataError, match="log1p"):
        load_panel(p, [VariableDef("x", transform="log1p")])
    with pytest.raises(ConfigError):
        VariableDef("x", transform="sqrt")


# -- screening ----------------------------------------------------------------

def test_screen_hand_count():
    d = frame(10, ST=[0, 1, 0, 0, 0, 0, 0, 0, 0, 0], x=np.arange(10.0))
    f = d.frame
    f.loc[[3, 4], "industry"] = "J66"
    d = PanelDataset(f)
    report = {}
    out = screen(d, ScreeningConfig(drop_sectors=["J66"], drop_flags=["ST"]), report)
    assert out.n_rows == 7
    np.testing.assert_array_equal(out.column("x"), [0, 2, 5, 6, 7, 8, 9])
    assert report["dropped_sector"] == 2 and report["dropped_flag"] == 1


def test_screen_noop_and_errors():
    d = frame(5, x=np.arange(5.0))
    assert screen(d, ScreeningConfig()).n_rows == 5
    with pytest.raises(DataError, match="flag"):
        screen(d, ScreeningConfig(drop_flags=["ST"]))
    with pytest.raises(ConfigError):
        ScreeningConfig(winsor_p=0.5)


def test_screen_idempotent():
    d = frame(8, ST=[0, 1] * 4, x=[1, np.nan, 3, 4, np.nan, 6, 7, 8])
    cfg = ScreeningConfig(drop_flags=["ST"], required_columns=["x"])
    once = screen(d, cfg)
    assert once.frame.equals(screen(once, cfg).frame)


# -- winsorization -------------------------------------------------------------

def test_winsorize_constant_column_unchanged():
    d = frame(20, x=np.full(20, 3.0))
    np.testing.assert_array_equal(winsorize(d, ["x"], 0.05).column("x"), 3.0)


def test_winsorize_sort_and_clamp():
    d = frame(100, x=np.arange(1.0, 101.0))
    out = winsorize(d, ["x"], 0.05, method="linear").column("x")
    lo, hi = np.quantile(np.arange(1.0, 101.0), [0.05, 0.95])
    np.testing.assert_allclose(out, np.clip(np.arange(1.0, 101.0), lo, hi))


def test_winsorize_rejects_non_numeric():
    d = frame(4, s=["a", "b", "c", "d"])
    with pytest.raises(DataError, match="not numeric"):
        winsorize(d, ["s"], 0.1)


def test_winsorize_one_percent_clamps_about_two_percent():
    x = np.random.default_rng(0).standard_normal(5000)
    out = winsorize(frame(5000, x=x), ["x"], 0.01).column("x")
    assert 0.97 <= np.mean(out == x) <= 0.99


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6) | st.just(float("nan")), min_size=3, max_size=60),
       st.floats(0.01, 0.45))
def test_winsorize_idempotent_and_monotone(values, p):
    d = frame(len(values), x=np.array(values))
    once = winsorize(d, ["x"], p)
    twice = winsorize(once, ["x"], p)
    np.testing.assert_array_equal(once.column("x"), twice.column("x"))
    x, w = d.column("x"), once.column("x")
    ok = ~np.isnan(x)
    assert np.isnan(w[~ok]).all()
    order = np.argsort(x[ok], kind="stable")
    assert np.all(np.diff(w[ok][order]) >= 0)


# -- imputation ----------------------------------------------------------------

def test_impute_group_mean():
    d = frame(3, x=[2.0, np.nan, 4.0])
    out, unfilled = impute_group_mean(d, ["x"])
    np.testing.assert_array_equal(out.column("x"), [2, 3, 4])
    assert unfilled == []


def test_impute_empty_group_flagged():
    d = frame(2, x=[np.nan, np.nan])
    out, unfilled = impute_group_mean(d, ["x"])
    assert np.isnan(out.column("x")).all()
    assert len(unfilled) == 2 and unfilled[0]["column"] == "x"


def test_impute_identity_without_missing():
    d = frame(4, x=[1.0, 2, 3, 4])
    out, _ = impute_group_mean(d, ["x"])
    assert out.frame.equals(d.frame)


# -- lead / lag ----------------------------------------------------------------

def gap_panel():
    return PanelDataset(pd.DataFrame({
        "firm_id": [1, 1, 1, 1, 2, 2], "year": [2015, 2016, 2018, 2019, 2015, 2016],
        "industry": "C01", "province": "P01", "v": [1.0, 2, 3, 4, 5, 6]}))


def test_lead_lag_hand_cases():
    d = gap_panel()
    np.testing.assert_array_equal(lead_lag(d, "v", 0), d.column("v"))
    lead = lead_lag(d, "v", 1)
    np.testing.assert_array_equal(lead, [2, np.nan, 4, np.nan, 6, np.nan])


def test_lead_lag_round_trip():
    d = gap_panel()
    shifted = d.with_columns(w=lead_lag(d, "v", 1))
    back = lead_lag(shifted, "w", -1)
    ok = ~np.isnan(back)
    np.testing.assert_array_equal(back[ok], d.column("v")[ok])
    with pytest.raises(DataError):
        lead_lag(d, "nope", 1)


# -- clean / debt cost -----------------------------------------------------------

def test_clean_report_counts():
    d = frame(6, ST=[0, 0, 0, 0, 0, 1], x=[1.0, np.nan, 3, 4, 5, 100])
    out, report = clean(d, ScreeningConfig(drop_flags=["ST"], imputable_columns=["x"],
                                           winsor_p=0.2))
    assert report["rows_in"] == 6 and report["rows_out"] == 5
    assert report["imputed_unfilled_cells"] == 0
    assert not np.isnan(out.column("x")).any()


def test_debt_cost_ratio():
    d = frame(3, i=[1.0, 2, 1], f=[0.5, 0, 1], o=[0.5, 1, 0], L=[100.0, 0, np.nan])
    r = debt_cost_ratio(d, "i", "f", "o", "L")
    assert r[0] == pytest.approx(2.0)
    assert np.isnan(r[1:]).all()
