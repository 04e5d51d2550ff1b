import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from panelcausal.errors import ConfigError, DataError
from panelcausal.panel import PanelDataset
from panelcausal.report import (
    ReportBundle, canonical, canonical_json, correlation_matrix, descriptive_table, emit_report,
    regression_markdown, render_markdown, starred_correlations,
)


def panel(**cols):
    n = len(next(iter(cols.values())))
    return PanelDataset(pd.DataFrame({"firm_id": np.arange(n), "year": 2015, "industry": "C",
                                      "province": "P", **cols}))


def test_descriptive_table_moments():
    x = np.array([1.0, 2, 3, 4, 10])
    t = descriptive_table(panel(x=x), ["x"]).loc["x"]
    assert t["N"] == 5 and t["Mean"] == 4 and t["Median"] == 3
    assert t["SD"] == pytest.approx(x.std(ddof=1))
    assert t["Kurtosis"] == pytest.approx(stats.kurtosis(x, fisher=False))
    assert t["Skewness"] == pytest.approx(stats.skew(x))
    assert list(t.index) == ["N", "Mean", "SD", "Min", "Median", "Max", "Kurtosis", "Skewness"]


def test_descriptive_skips_missing_and_rejects_empty():
    t = descriptive_table(panel(x=[1.0, np.nan, 3.0]), ["x"])
    assert t.loc["x", "N"] == 2
    with pytest.raises(DataError):
        descriptive_table(panel(x=[np.nan, np.nan]), ["x"])


def test_correlation_and_stars():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(200)
    b = a + 0.5 * rng.standard_normal(200)
    c = rng.standard_normal(200)
    R, P = correlation_matrix(panel(a=a, b=b, c=c), ["a", "b", "c"])
    assert R.loc["a", "b"] == pytest.approx(np.corrcoef(a, b)[0, 1])
    assert np.allclose(R, R.T) and (np.diag(R) == 1).all()
    table = starred_correlations(R, P)
    assert table.loc["b", "a"].endswith("***")
    assert table.loc["a", "b"] == ""
    assert table.loc["a", "a"] == "1.000"


def test_six_significant_digits_and_nan():
    assert canonical(1.23456789) == 1.23457
    assert canonical(123456789.0) == 123457000.0
    assert canonical(float("nan")) is None
    assert canonical(np.array([0.1, np.inf])) == [0.1, None]
    text = canonical_json({"b": 1, "a": np.float64(2.5e-10)})
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text)["a"] == 2.5e-10


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_canonical_rounding_idempotent(x):
    once = canonical(x)
    assert canonical(once) == once
    if x != 0:
        assert math.isclose(once, x, rel_tol=1e-5)


def test_p_004_gets_three_stars():
    md = regression_markdown("m", {"coefficients": {"D": {"estimate": 0.1, "se": 0.03,
                                                           "p": 0.004}}})
    assert "0.1000***" in md and "(0.0300)" in md
    md = regression_markdown("m", {"coefficients": {"D": {"estimate": 0.1, "se": 0.03,
                                                           "p": 0.07}}})
    assert "0.1000*" in md and "0.1000**" not in md


def bundle():
    t = pd.DataFrame({"a": [1.0, np.nan], "b": ["x", "y"]}, index=pd.Index(["r1", "r2"],
                                                                           name="row"))
    res = {"baseline": {"coefficients": {"D": {"estimate": 0.125, "se": 0.02, "p": 1e-5}},
                        "fit": {"n_obs": 100}}}
    return ReportBundle(res, {"tab": t}, {"config_hash": "abc", "seed": 1})


def test_emit_present_tables_only(tmp_path):
    paths = emit_report(bundle(), tmp_path)
    assert sorted(p.name for p in paths) == ["report.json", "report.md", "tab.csv"]
    assert "## baseline" in (tmp_path / "report.md").read_text()
    emit_report(ReportBundle(), tmp_path / "empty")
    assert sorted(p.name for p in (tmp_path / "empty").iterdir()) == ["report.json", "report.md"]


def test_reemit_identical_bytes(tmp_path):
    emit_report(bundle(), tmp_path / "a")
    again = ReportBundle.from_json((tmp_path / "a" / "report.json").read_text())
    emit_report(again, tmp_path / "b")
    for name in ("report.json", "report.md", "tab.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        emit_report(bundle(), blocker / "sub")
    with pytest.raises(DataError):
        emit_report(bundle(), tmp_path, formats=("pdf",))


def test_markdown_lists_star_legend():
    assert "* p<0.1, ** p<0.05, *** p<0.01" in render_markdown(bundle())
