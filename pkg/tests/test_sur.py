import numpy as np
import pandas as pd
import pytest

from panelcausal.causal import DidSpec, treatment_term
from panelcausal.errors import DataError, EstimationError
from panelcausal.panel import PanelDataset
from panelcausal.regress import FixedEffectSpec, ols_cluster
from panelcausal.sur import (
    SurSystem, breusch_pagan_independence, cross_equation_wald, restriction_rows,
    signed_equality_test, sur_fit, zero_tests,
)
from panelcausal.synth import CONTROLS, SUR_OUTCOMES, DgpConfig, generate_panel

REGS = ["AIWashing", *CONTROLS]


def sur_panel(**kw):
    panel, truth = generate_panel(DgpConfig(preset="sur_system", **kw))
    return panel.with_columns(AIWashing=treatment_term(panel, DidSpec(treat="Treat_true"))), truth


def frame_panel(n, **cols):
    f = pd.DataFrame({"firm_id": np.arange(n), "year": 2020, "industry": "C01",
                      "province": "P01", **cols})
    return PanelDataset(f)


def test_identical_regressors_reduce_to_ols():
    panel, _ = sur_panel(n_firms=200, seed=1)
    s = sur_fit(panel, SurSystem([(y, REGS) for y in SUR_OUTCOMES]))
    np.testing.assert_allclose(s.params, s.ols_params, rtol=0, atol=1e-8)
    np.testing.assert_allclose(s.sigma_hat, s.sigma_hat.T)
    assert np.linalg.eigvalsh(s.sigma_hat).min() >= 0


def test_hand_system_matches_stacked_arithmetic():
    rng = np.random.default_rng(2)
    n = 10
    x1, x2, z = rng.normal(size=(3, n))
    e = rng.multivariate_normal([0, 0], [[1, 0.6], [0.6, 1]], size=n)
    y1 = 1 + 0.5 * x1 + e[:, 0]
    y2 = -1 + 0.3 * x2 - 0.2 * z + e[:, 1]
    data = frame_panel(n, y1=y1, y2=y2, x1=x1, x2=x2, z=z)
    s = sur_fit(data, SurSystem([("y1", ["x1"]), ("y2", ["x2", "z"])], standardize_outcomes=False,
                                fe=None, vcov_type="gls"))
    X1 = np.column_stack([np.ones(n), x1])
    X2 = np.column_stack([np.ones(n), x2, z])
    b1 = np.linalg.lstsq(X1, y1, rcond=None)[0]
    b2 = np.linalg.lstsq(X2, y2, rcond=None)[0]
    E = np.column_stack([y1 - X1 @ b1, y2 - X2 @ b2])
    S = E.T @ E / n
    X = np.block([[X1, np.zeros((n, 3))], [np.zeros((n, 2)), X2]])
    Om = np.kron(np.linalg.inv(S), np.eye(n))
    A = X.T @ Om @ X
    beta = np.linalg.solve(A, X.T @ Om @ np.r_[y1, y2])
    np.testing.assert_allclose(s.params, beta, atol=1e-10)
    np.testing.assert_allclose(s.vcov, np.linalg.inv(A), atol=1e-10)
    np.testing.assert_allclose(s.sigma_hat, S, atol=1e-12)
    assert s.names == ["y1:_cons", "y1:x1", "y2:_cons", "y2:x2", "y2:z"]


def test_planted_coefficients_recovered():
    panel, truth = sur_panel(n_firms=1500, seed=3)
    s = sur_fit(panel, SurSystem([(y, REGS) for y in SUR_OUTCOMES], standardize_outcomes=False))
    for y, b in zip(SUR_OUTCOMES, truth.sur_coefs):
        assert s.coef(y, "AIWashing") == pytest.approx(b, abs=4 * s.se(y, "AIWashing"))


def test_one_equation_is_ols_on_demeaned_data():
    panel, _ = sur_panel(n_firms=150, seed=4)
    fe = FixedEffectSpec(("firm_id", "year"))
    s = sur_fit(panel, SurSystem([("DebtFC", REGS)], standardize_outcomes=False, fe=fe))
    ref = ols_cluster(panel.column("DebtFC"),
                      np.column_stack([panel.column(c) for c in REGS]),
                      fe.codes(panel), None, names=REGS)
    np.testing.assert_allclose(s.params, ref.params, atol=1e-10)
    assert s.n_obs == ref.n_obs
    # robust system vcov of one equation is HC1 with absorbed effects counted
    np.testing.assert_allclose(s.vcov, ref.vcov, rtol=1e-8)
    c = sur_fit(panel, SurSystem([("DebtFC", REGS)], standardize_outcomes=False, fe=fe,
                                 vcov_type="cluster"))
    ref_c = ols_cluster(panel.column("DebtFC"), np.column_stack([panel.column(c) for c in REGS]),
                        fe.codes(panel), panel.key("firm_id"), names=REGS)
    np.testing.assert_allclose(c.vcov, ref_c.vcov, rtol=1e-8)


def test_outcome_rescaling_invariance():
    panel, _ = sur_panel(n_firms=150, seed=5)
    system = lambda: SurSystem([(y, REGS) for y in SUR_OUTCOMES])
    a = sur_fit(panel, system())
    scaled = panel.with_columns(DebtFC=37.0 * panel.column("DebtFC") + 5.0)
    b = sur_fit(scaled, system())
    np.testing.assert_allclose(a.params, b.params, atol=1e-10)
    np.testing.assert_allclose(a.vcov, b.vcov, atol=1e-12)


def test_iterated_fgls_is_order_invariant():
    panel, _ = sur_panel(n_firms=150, seed=6,
                         sur_error_corr=[[1, .5, .3, .2], [.5, 1, .4, .1], [.3, .4, 1, .3],
                                         [.2, .1, .3, 1]])
    eqs = [("DebtFC", ["AIWashing", "Size", "Lev"]), ("DebtFlow", ["AIWashing", "ROA"]),
           ("AIWordIntensity", ["AIWashing", "Top5", "Lev"]), ("AIPatentOutput", ["AIWashing"])]
    a = sur_fit(panel, SurSystem(eqs, iterate=True, tol=1e-13))
    b = sur_fit(panel, SurSystem(eqs[::-1], iterate=True, tol=1e-13))
    assert a.iterations > 1
    for y, xs in eqs:
        for x in xs:
            assert a.coef(y, x) == pytest.approx(b.coef(y, x), abs=1e-9)
            assert a.se(y, x) == pytest.approx(b.se(y, x), abs=1e-9)
    wa = zero_tests(a, "AIWashing")["joint"]
    wb = zero_tests(b, "AIWashing")["joint"]
    assert wa.statistic == pytest.approx(wb.statistic, rel=1e-8)


def test_distinct_regressors_differ_from_ols():
    panel, _ = sur_panel(n_firms=150, seed=7,
                         sur_error_corr=[[1, .6, 0, 0], [.6, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    eqs = [("DebtFC", ["AIWashing", "Size"]), ("DebtFlow", ["AIWashing", "ROA"])]
    s = sur_fit(panel, SurSystem(eqs))
    assert np.abs(s.params - s.ols_params).max() > 1e-6


def test_singular_sigma_is_refused():
    panel, _ = sur_panel(n_firms=60, seed=8)
    with pytest.raises(EstimationError, match="singular"):
        sur_fit(panel, SurSystem([("DebtFC", ["AIWashing"]), ("DebtFC", ["AIWashing"])]))


def test_missing_columns():
    panel, _ = sur_panel(n_firms=60, seed=8)
    with pytest.raises(DataError):
        sur_fit(panel, SurSystem([("nope", ["AIWashing"])]))


def test_breusch_pagan_arithmetic():
    a = np.tile([1.0, -1.0], 24)
    b = np.repeat([1.0, -1.0], 24)
    assert abs(a @ b) < 1e-12
    res = breusch_pagan_independence(np.column_stack([a, b]))
    assert res.statistic == pytest.approx(0, abs=1e-20) and res.df == 1
    e = np.random.default_rng(0).normal(size=50)
    res = breusch_pagan_independence(np.column_stack([e, e]))
    assert res.statistic == pytest.approx(50.0) and res.df == 1
    S = np.array([[1, .3, .3, .3], [.3, 1, .3, .3], [.3, .3, 1, .3], [.3, .3, .3, 1]])
    res = breusch_pagan_independence(sigma=S, n=100)
    assert res.statistic == pytest.approx(100 * 6 * 0.09) and res.df == 6
    with pytest.raises(DataError):
        breusch_pagan_independence(sigma=np.eye(1), n=10)


def test_wald_identities():
    panel, _ = sur_panel(n_firms=200, seed=9)
    s = sur_fit(panel, SurSystem([(y, REGS) for y in SUR_OUTCOMES]))
    R = restriction_rows(s, [(y, "AIWashing") for y in SUR_OUTCOMES])
    at_hat = cross_equation_wald(s, R, R @ s.params)
    assert at_hat.statistic == pytest.approx(0, abs=1e-18) and at_hat.p == pytest.approx(1)
    one = cross_equation_wald(s, R[[0]], bonferroni=4)
    z = s.coef("DebtFC", "AIWashing") / s.se("DebtFC", "AIWashing")
    assert one.statistic == pytest.approx(z ** 2, rel=1e-10)
    assert one.p_adjusted == pytest.approx(min(1, 4 * one.p))
    tests = zero_tests(s, "AIWashing")
    assert tests["joint"].df == 4 and len(tests["individual"]) == 4
    eq = signed_equality_test(s, "AIWashing", [1, 1, -1, 1])
    assert eq.df == 3
    with pytest.raises(EstimationError):
        cross_equation_wald(s, np.vstack([R[0], R[0]]))
    with pytest.raises(DataError):
        cross_equation_wald(s, np.ones((1, 3)))


def test_cluster_vcov_and_report():
    panel, _ = sur_panel(n_firms=100, seed=10)
    s = sur_fit(panel, SurSystem([(y, REGS) for y in SUR_OUTCOMES], vcov_type="cluster"))
    d = s.to_dict()
    assert set(d["equations"]) == set(SUR_OUTCOMES)
    assert d["equations"]["DebtFC"]["AIWashing"]["se"] > 0
    np.testing.assert_allclose(np.diag(s.residual_corr), 1)
    assert s.n_effective == s.n_obs - s.df_absorbed
