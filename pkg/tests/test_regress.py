import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from panelcausal.errors import EstimationError, SeparationError
from panelcausal.regress import (
    CollinearityWarning, FixedEffectSpec, binary_mle, demean_absorb, group_codes,
    inverse_mills, marginal_effects, ols_cluster,
)
from panelcausal.regress.binary import LINKS, MleResult


def dummies(codes):
    codes = np.asarray(codes)
    return (codes[:, None] == np.unique(codes)[None, :]).astype(float)


def dense_fe_regression(y, X, *codes):
    """Explicit dummy-variable least squares: the oracle for absorption."""
    D = np.column_stack([np.ones(len(y))] + [dummies(c)[:, 1:] for c in codes])
    Z = np.column_stack([X, D])
    beta, *_ = np.linalg.lstsq(Z, y, rcond=None)
    return beta[: X.shape[1]], y - Z @ beta, np.linalg.matrix_rank(Z)


def test_one_way_demean_zero_group_means():
    rng = np.random.default_rng(1)
    g = rng.integers(0, 5, 40)
    x = rng.normal(size=(40, 2))
    out, keep = demean_absorb(x, [g])
    assert keep.all()
    for level in np.unique(g):
        np.testing.assert_allclose(out[g == level].mean(axis=0), 0, atol=1e-12)


def test_two_way_matches_dummy_projection_on_hand_panel():
    firm = np.array([0, 0, 1, 1, 2, 2])
    year = np.array([0, 1, 0, 1, 0, 1])
    x = np.array([1.0, 4.0, 2.0, 3.0, 7.0, 5.0])
    out, _ = demean_absorb(x[:, None], [firm, year], tolerance=1e-14)
    D = np.column_stack([np.ones(6), dummies(firm)[:, 1:], dummies(year)[:, 1:]])
    resid = x - D @ np.linalg.lstsq(D, x, rcond=None)[0]
    np.testing.assert_allclose(out[:, 0], resid, atol=1e-10)


def test_singleton_firm_is_dropped():
    firm = np.array([0, 0, 0, 1, 1, 1, 2])
    year = np.array([0, 1, 2, 0, 1, 2, 0])
    y = np.array([1.0, 2.0, 0.4, 0.5, 3.0, 1.1, 9.0])
    x = np.array([0.2, 0.1, 0.7, 0.4, 0.9, 0.3, 1.0])
    res = ols_cluster(y, x, {"firm": firm, "year": year}, None, names=["x"])
    assert res.dropped_singletons == 1
    assert res.n_obs == 6
    assert np.isnan(res.residuals[6])


def test_exact_fit():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 2))
    y = 1.5 + X @ np.array([2.0, -1.0])
    res = ols_cluster(y, X, None, np.arange(30) % 5, names=["a", "b"])
    np.testing.assert_allclose(res.residuals, 0, atol=1e-10)
    assert res.r2 == pytest.approx(1.0)
    assert res.coef("a") == pytest.approx(2.0)


def test_cluster_sandwich_matches_hand_arithmetic():
    x = np.array([0.0, 1.0, 2.0, 3.0, 1.0, 2.0, 4.0, 5.0])
    y = np.array([1.0, 2.5, 2.9, 4.2, 0.7, 2.2, 3.1, 6.0])
    g = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    res = ols_cluster(y, x, None, g, names=["x"])
    X = np.column_stack([np.ones(8), x])
    b = np.linalg.solve(X.T @ X, X.T @ y)
    u = y - X @ b
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((2, 2))
    for level in (0, 1):
        s = X[g == level].T @ u[g == level]
        meat += np.outer(s, s)
    N, K, G = 8, 2, 2
    expected = G / (G - 1) * (N - 1) / (N - K) * bread @ meat @ bread
    np.testing.assert_allclose(res.params, b, atol=1e-12)
    np.testing.assert_allclose(res.vcov, expected, atol=1e-12)
    assert res.df_inference == 1


def test_one_observation_per_cluster_equals_hc1():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 2))
    y = X @ [1.0, 0.5] + rng.normal(size=50) * (1 + np.abs(X[:, 0]))
    clustered = ols_cluster(y, X, None, np.arange(50))
    hc1 = ols_cluster(y, X, None, None)
    np.testing.assert_allclose(clustered.vcov, hc1.vcov, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_groups=st.integers(2, 30), n=st.integers(40, 500))
def test_frisch_waugh_absorption_equals_dummies(seed, n_groups, n):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, n_groups, n)
    X = rng.normal(size=(n, 3)) + g[:, None] * 0.1
    y = X @ [0.3, -1.0, 2.0] + np.sin(g) + rng.normal(size=n)
    res = ols_cluster(y, X, {"g": g}, None, drop_singletons=False)
    slopes, resid, rank = dense_fe_regression(y, X, g)
    np.testing.assert_allclose(res.params, slopes, atol=1e-6)
    np.testing.assert_allclose(res.residuals, resid, atol=1e-6)
    adj = 1 - (1 - res.r2) * (n - 1) / (n - rank)
    assert res.adj_r2 == pytest.approx(adj, abs=1e-10)


def test_two_way_degrees_and_adj_r2_match_dummy_regression():
    rng = np.random.default_rng(4)
    firm = np.repeat(np.arange(30), 5)
    year = np.tile(np.arange(5), 30)
    X = rng.normal(size=(150, 2))
    y = X @ [1.0, -2.0] + firm * 0.3 + year * 0.2 + rng.normal(size=150)
    res = ols_cluster(y, X, {"firm": firm, "year": year}, firm)
    slopes, _, rank = dense_fe_regression(y, X, firm, year)
    np.testing.assert_allclose(res.params, slopes, atol=1e-8)
    assert res.df_fe + 2 == rank
    assert res.adj_r2 == pytest.approx(1 - (1 - res.r2) * 149 / (150 - rank), abs=1e-10)


def test_scale_equivariance():
    rng = np.random.default_rng(5)
    firm = np.repeat(np.arange(20), 4)
    X = rng.normal(size=(80, 2))
    y = X @ [1.0, 0.5] + rng.normal(size=80)
    a = ols_cluster(y, X, {"firm": firm}, firm)
    b = ols_cluster(3.5 * y, X, {"firm": firm}, firm)
    np.testing.assert_allclose(b.params, 3.5 * a.params, rtol=1e-10)
    np.testing.assert_allclose(b.bse, 3.5 * a.bse, rtol=1e-10)
    np.testing.assert_allclose(b.tvalues, a.tvalues, rtol=1e-10)


def test_collinear_column_dropped_with_warning():
    rng = np.random.default_rng(6)
    x = rng.normal(size=60)
    X = np.column_stack([x, 2 * x, rng.normal(size=60)])
    y = x + rng.normal(size=60)
    with pytest.warns(CollinearityWarning):
        res = ols_cluster(y, X, None, None, names=["a", "b", "c"])
    assert res.names == ["_cons", "a", "c"]
    with pytest.raises(EstimationError):
        res.coef("b")


def test_errors_for_single_cluster_and_constant_outcome():
    X = np.arange(10.0)
    with pytest.raises(EstimationError):
        ols_cluster(np.arange(10.0) ** 2, X, None, np.zeros(10))
    firm = np.repeat(np.arange(5), 2)
    with pytest.raises(EstimationError):
        ols_cluster(np.repeat(np.arange(5.0), 2), X, {"firm": firm}, None)


def test_weighted_matches_replicated_rows():
    rng = np.random.default_rng(7)
    firm = np.repeat(np.arange(15), 4)
    X = rng.normal(size=(60, 1))
    y = X[:, 0] + rng.normal(size=60)
    w = rng.integers(1, 4, 60).astype(float)
    weighted = ols_cluster(y, X, {"firm": firm}, None, weights=w)
    rep = np.repeat(np.arange(60), w.astype(int))
    replicated = ols_cluster(y[rep], X[rep], {"firm": firm[rep]}, None)
    np.testing.assert_allclose(weighted.params, replicated.params, atol=1e-9)


def test_cluster_ci_coverage_monte_carlo():
    # 500 replications, 60 clusters with a shared cluster shock
    rng = np.random.default_rng(8)
    hits = 0
    G, m = 60, 8
    g = np.repeat(np.arange(G), m)
    for _ in range(500):
        x = rng.normal(size=G * m) + np.repeat(rng.normal(size=G), m)
        u = np.repeat(rng.normal(size=G), m) + rng.normal(size=G * m)
        y = 1.0 + 0.5 * x + u
        res = ols_cluster(y, x, None, g, names=["x"])
        lo, hi = res.conf_int("x")
        hits += lo <= 0.5 <= hi
    assert 0.93 <= hits / 500 <= 0.97


def test_fixed_effect_spec_codes_interactions():
    import pandas as pd
    frame = pd.DataFrame({"industry": ["a", "a", "b", "b"], "year": [1, 2, 1, 2],
                          "firm_id": [1, 1, 2, 2]})
    spec = FixedEffectSpec(["firm_id", ("industry", "year")])
    codes = spec.codes(frame)
    assert list(codes) == ["firm_id", "industry#year"]
    assert len(np.unique(codes["industry#year"])) == 4
    np.testing.assert_array_equal(group_codes(["b", "a", "b"]), [1, 0, 1])


# ---------------------------------------------------------------------------
# binary response


def grid_search_mle(y, x, link):
    """Zooming 2-D grid search of the log-likelihood (oracle for Newton)."""
    lk = LINKS[link]

    def ll(a, b):
        z = a[..., None] + b[..., None] * x
        return lk.loglik_terms(z, y).sum(axis=-1)

    center, half = np.zeros(2), 4.0
    while half > 1e-6:
        grid = np.linspace(-half, half, 41)
        A, B = np.meshgrid(center[0] + grid, center[1] + grid, indexing="ij")
        vals = ll(A, B)
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        center = np.array([A[i, j], B[i, j]])
        half /= 8
    return center


HAND_X = np.array([-1.8, -1.2, -0.9, -0.7, -0.4, -0.3, -0.1, 0.0, 0.2, 0.3,
                   0.4, 0.6, 0.8, 0.9, 1.1, 1.3, 1.5, 1.7, 2.0, 2.4])
HAND_Y = np.array([0, 0, 0, 1, 0, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1], dtype=float)


@pytest.mark.parametrize("link", ["probit", "logit"])
def test_mle_matches_grid_search(link):
    m = binary_mle(HAND_Y, HAND_X, link)
    oracle = grid_search_mle(HAND_Y, HAND_X, link)
    np.testing.assert_allclose(m.params, oracle, atol=1e-4)
    assert m.gradient_norm < 1e-8
    assert 0 <= m.pseudo_r2 <= 1


def test_null_model_slopes_vanish():
    rng = np.random.default_rng(9)
    y = (rng.random(20_000) < 0.3).astype(float)
    x = rng.normal(size=20_000)
    m = binary_mle(y, x, "probit")
    assert abs(m.coef("x0")) < 0.05
    assert m.pseudo_r2 < 1e-3


def test_perfect_separation_raises():
    x = np.arange(20.0)
    y = (x > 9.5).astype(float)
    with pytest.raises(SeparationError):
        binary_mle(y, x, "probit")


def test_ame_closed_form_at_zero_covariate():
    m = MleResult(names=["_cons", "x"], params=np.array([0.3, 0.7]), vcov=np.eye(2) * 0.01,
                  log_likelihood=-1, log_likelihood_null=-2, pseudo_r2=0.5, link="probit",
                  converged=True, iterations=1, n_obs=5, n_clusters=None, add_constant=True,
                  sample=np.ones(5, bool))
    me = marginal_effects(m, np.zeros(5))
    assert me["x"] == pytest.approx(0.7 * stats.norm.pdf(0.3), abs=1e-14)
    m.params = np.array([0.3, 0.0])
    assert marginal_effects(m, np.zeros(5))["x"] == 0.0


@pytest.mark.parametrize("link", ["probit", "logit"])
def test_ame_matches_finite_difference(link):
    rng = np.random.default_rng(10)
    X = np.column_stack([rng.normal(size=400), rng.random(400) < 0.4])
    z = 0.2 + 0.8 * X[:, 0] - 0.5 * X[:, 1] + rng.normal(size=400)
    y = (z > 0).astype(float)
    m = binary_mle(y, X, link, cluster=np.arange(400) % 40)
    me = marginal_effects(m, X)
    h = 1e-5
    up, dn = X.copy(), X.copy()
    up[:, 0] += h
    dn[:, 0] -= h
    fd = (m.predict(up).mean() - m.predict(dn).mean()) / (2 * h)
    assert me["x0"] == pytest.approx(fd, abs=1e-6)
    one, zero = X.copy(), X.copy()
    one[:, 1], zero[:, 1] = 1, 0
    assert me["x1"] == pytest.approx(m.predict(one).mean() - m.predict(zero).mean(), abs=1e-12)
    assert (me.se > 0).all()


def test_inverse_mills_at_zero():
    assert inverse_mills(0.0) == pytest.approx(0.79788, abs=5e-6)
    assert np.isfinite(inverse_mills(-40.0)) and inverse_mills(-40.0) > 0
