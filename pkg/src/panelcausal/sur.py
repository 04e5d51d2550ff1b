"""Seemingly unrelated regressions with within-demeaning and system tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import DataError, EstimationError
from .panel import PanelDataset
from .regress import Absorber, FixedEffectSpec, absorbed_degrees, group_codes, singleton_mask
from .regress.ols import cluster_meat, stars

logger = logging.getLogger(__name__)


@dataclass
class TestResult:
    statistic: float
    df: int
    p: float
    p_adjusted: float | None = None

    def to_dict(self) -> dict:
        out = {"statistic": self.statistic, "df": self.df, "p": self.p}
        if self.p_adjusted is not None:
            out["p_adjusted"] = self.p_adjusted
        return out


@dataclass
class SurSystem:
    """A system of linear equations estimated jointly.

    ``equations`` is a list of ``(outcome, regressors)`` pairs. Fixed
    effects in ``fe`` are swept out of every variable before stacking.
    ``vcov_type`` is ``"robust"`` (heteroskedasticity-robust system
    sandwich), ``"cluster"`` (by ``cluster``) or ``"gls"``. Degrees of
    freedom swept out by the fixed effects enter the small-sample factor
    of each: HC1-style for ``robust``, CR1 for ``cluster`` and
    ``n / (n - df_absorbed)`` for ``gls``. The fitted attributes are
    filled in by :func:`sur_fit`.
    """

    equations: list
    standardize_outcomes: bool = True
    fe: FixedEffectSpec | None = field(default_factory=lambda: FixedEffectSpec(("firm_id", "year")))
    vcov_type: str = "robust"
    cluster: str | None = "firm_id"
    iterate: bool = False
    tol: float = 1e-10
    max_iter: int = 500

    sigma_hat: np.ndarray | None = None
    params: np.ndarray | None = None
    vcov: np.ndarray | None = None
    names: list = field(default_factory=list)
    residuals: np.ndarray | None = None
    n_obs: int = 0
    df_absorbed: int = 0
    iterations: int = 0
    ols_params: np.ndarray | None = None

    def __post_init__(self):
        self.equations = [(str(y), [str(x) for x in xs]) for y, xs in self.equations]
        if isinstance(self.fe, (list, tuple)):
            self.fe = FixedEffectSpec(tuple(self.fe))
        if self.vcov_type not in ("robust", "cluster", "gls"):
            raise DataError(f"unknown SUR vcov_type {self.vcov_type!r}")

    @property
    def outcomes(self) -> list[str]:
        return [y for y, _ in self.equations]

    @property
    def n_effective(self) -> int:
        """Rows less the degrees of freedom swept out by the fixed effects."""
        return self.n_obs - self.df_absorbed

    @property
    def fitted(self) -> bool:
        return self.params is not None

    def index(self, outcome: str, regressor: str) -> int:
        name = f"{outcome}:{regressor}"
        if name not in self.names:
            raise EstimationError(f"no coefficient {name!r} in the system")
        return self.names.index(name)

    def coef(self, outcome: str, regressor: str) -> float:
        return float(self.params[self.index(outcome, regressor)])

    def se(self, outcome: str, regressor: str) -> float:
        i = self.index(outcome, regressor)
        return float(np.sqrt(self.vcov[i, i]))

    @property
    def coefficients(self) -> dict:
        out = {}
        for y, xs in self.equations:
            out[y] = {x: self.coef(y, x) for x in xs}
        return out

    @property
    def residual_corr(self) -> np.ndarray:
        d = np.sqrt(np.diag(self.sigma_hat))
        return self.sigma_hat / np.outer(d, d)

    def to_dict(self) -> dict:
        eqs = {}
        for y, xs in self.equations:
            rows = {}
            for x in xs:
                b, s = self.coef(y, x), self.se(y, x)
                p = float(2 * stats.norm.sf(abs(b / s)))
                rows[x] = {"estimate": b, "se": s, "z": b / s, "p": p, "stars": stars(p)}
            eqs[y] = rows
        return {"equations": eqs, "n_obs": self.n_obs, "iterations": self.iterations,
                "vcov_type": self.vcov_type, "standardized": self.standardize_outcomes,
                "df_absorbed": self.df_absorbed, "sigma_hat": self.sigma_hat.tolist(),
                "residual_corr": self.residual_corr.tolist()}


def _zscore(v):
    sd = v.std(ddof=1)
    if not sd > 0:
        raise EstimationError("cannot standardize an outcome with zero variance")
    return (v - v.mean()) / sd


def _check_sigma(S):
    eig = np.linalg.eigvalsh(S)
    if eig.min() <= 1e-12 * max(eig.max(), 1e-300):
        raise EstimationError(
            f"residual covariance is singular (eigenvalues {np.array2string(eig, precision=3)}); "
            "drop a redundant equation")


def _gls(Xs, ys, S):
    """Block-form FGLS solve. Returns (params, A) with A the GLS information."""
    Si = np.linalg.inv(S)
    m = len(Xs)
    sizes = [X.shape[1] for X in Xs]
    off = np.concatenate([[0], np.cumsum(sizes)])
    A = np.zeros((off[-1], off[-1]))
    b = np.zeros(off[-1])
    for i in range(m):
        for j in range(m):
            A[off[i]:off[i + 1], off[j]:off[j + 1]] = Si[i, j] * (Xs[i].T @ Xs[j])
            b[off[i]:off[i + 1]] += Si[i, j] * (Xs[i].T @ ys[j])
    return np.linalg.solve(A, b), A, off


def _residuals(Xs, ys, params, off):
    return np.column_stack([ys[i] - Xs[i] @ params[off[i]:off[i + 1]] for i in range(len(Xs))])


def sur_fit(data: PanelDataset, system: SurSystem) -> SurSystem:
    """Fit ``system`` by feasible GLS and fill in its estimates.

    Stage 1 is equation-by-equation least squares on demeaned data;
    ``sigma_hat`` is the residual cross-product over ``n``. Stage 2 is one
    GLS solve, repeated to convergence when ``system.iterate`` is set.
    All equations share the rows where every variable is observed.
    """
    if not system.equations:
        raise DataError("SUR system has no equations")
    needed = sorted({c for y, xs in system.equations for c in (y, *xs)})
    missing = [c for c in needed if c not in data]
    if missing:
        raise DataError(f"SUR columns not in data: {missing}")
    for y, xs in system.equations:
        if not xs:
            raise DataError(f"equation for {y!r} has no regressors")
    V = {c: data.column(c) for c in needed}
    ok = np.all([np.isfinite(v) for v in V.values()], axis=0)
    if system.fe is not None:
        codes = [c[ok] for c in system.fe.codes(data).values()]
        keep = singleton_mask([group_codes(c) for c in codes])
        ok[np.flatnonzero(ok)[~keep]] = False
        codes = [group_codes(c[keep]) for c in codes]
    n = int(ok.sum())
    if n == 0:
        raise EstimationError("no rows with every SUR variable observed")
    V = {c: v[ok] for c, v in V.items()}
    if system.standardize_outcomes:
        for y in system.outcomes:
            V[y] = _zscore(V[y])
    df_abs = 0
    if system.fe is not None:
        absorber = Absorber(codes, None, system.fe.tolerance, system.fe.max_iterations)
        M = absorber.demean(np.column_stack([V[c] for c in needed]))
        V = {c: M[:, j] for j, c in enumerate(needed)}
        df_abs = absorbed_degrees(codes)
        const = []
    else:
        const = [np.ones(n)]
    ys = [V[y] for y in system.outcomes]
    Xs = [np.column_stack(const + [V[x] for x in xs]) for _, xs in system.equations]
    names = [f"{y}:{x}" for y, xs in system.equations
             for x in ([] if system.fe is not None else ["_cons"]) + xs]
    for (y, _), X in zip(system.equations, Xs):
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise EstimationError(f"regressors of equation {y!r} are collinear after demeaning")

    ols = np.concatenate([np.linalg.lstsq(X, yv, rcond=None)[0] for X, yv in zip(Xs, ys)])
    off = np.concatenate([[0], np.cumsum([X.shape[1] for X in Xs])])
    E = _residuals(Xs, ys, ols, off)
    S = E.T @ E / n
    _check_sigma(S)
    params, A, _ = _gls(Xs, ys, S)
    it = 1
    if system.iterate:
        for it in range(2, system.max_iter + 1):
            E = _residuals(Xs, ys, params, off)
            S = E.T @ E / n
            _check_sigma(S)
            new, A, _ = _gls(Xs, ys, S)
            done = np.abs(new - params).max() < system.tol * max(1.0, np.abs(params).max())
            params = new
            if done:
                break
        else:
            raise EstimationError(f"iterated FGLS did not converge in {system.max_iter} steps")
    E = _residuals(Xs, ys, params, off)
    bread = np.linalg.inv(A)
    # per-equation regressor count; absorbed effects use up residual df too
    k = sum(X.shape[1] for X in Xs) / len(Xs)
    if system.vcov_type == "gls":
        vcov = n / max(n - df_abs, 1) * bread
    else:
        W = E @ np.linalg.inv(S)  # row t: Sigma^-1 e_t
        scores = np.column_stack([Xs[i] * W[:, [i]] for i in range(len(Xs))])
        if system.vcov_type == "cluster":
            if system.cluster is None:
                raise DataError("cluster vcov needs a cluster key")
            clus = group_codes(data.key(system.cluster)[ok])
            G = len(np.unique(clus))
            if G < 2:
                raise EstimationError("cluster-robust covariance needs at least 2 clusters")
            df_fe = absorbed_degrees(codes, clus) if system.fe is not None else 0
            meat = G / (G - 1) * (n - 1) / max(n - k - df_fe, 1) * cluster_meat(scores, clus)
        else:
            meat = n / max(n - k - df_abs, 1) * (scores.T @ scores)
        vcov = bread @ meat @ bread
    vcov = (vcov + vcov.T) / 2

    system.sigma_hat = (S + S.T) / 2
    system.params = params
    system.vcov = vcov
    system.names = names
    system.residuals = E
    system.n_obs = n
    system.df_absorbed = int(df_abs)
    system.iterations = it
    system.ols_params = ols
    return system


# ---------------------------------------------------------------------------
# tests


def breusch_pagan_independence(residuals=None, n: int | None = None, *,
                               sigma=None) -> TestResult:
    """Lagrange-multiplier test that the cross-equation error covariance is diagonal.

    Pass either the ``(n, m)`` residual matrix or a covariance ``sigma``
    together with ``n``. The statistic is ``n`` times the sum of squared
    pairwise correlations, chi-square with ``m(m-1)/2`` degrees of freedom.
    """
    if sigma is None:
        E = np.asarray(residuals, dtype=float)
        if E.ndim != 2:
            raise DataError("residuals must be an (n, m) matrix")
        sigma = E.T @ E / len(E)
        n = len(E) if n is None else n
    S = np.asarray(sigma, dtype=float)
    m = S.shape[0]
    if m < 2:
        raise DataError("the independence test needs at least two equations")
    if n is None:
        raise DataError("n is required when passing a covariance matrix")
    d = np.sqrt(np.diag(S))
    R = S / np.outer(d, d)
    iu = np.triu_indices(m, 1)
    stat = float(n * np.sum(R[iu] ** 2))
    df = m * (m - 1) // 2
    return TestResult(stat, df, float(stats.chi2.sf(stat, df)))


def cross_equation_wald(system: SurSystem, R, r=None, bonferroni: int | None = None) -> TestResult:
    """Wald test of ``R beta = r`` using the system covariance.

    ``bonferroni`` multiplies the p-value by the number of tests in the
    family (capped at 1) and reports it as ``p_adjusted``.
    """
    if not system.fitted:
        raise EstimationError("system is not fitted")
    R = np.atleast_2d(np.asarray(R, dtype=float))
    k = len(system.params)
    if R.shape[1] != k:
        raise DataError(f"restriction matrix has {R.shape[1]} columns for {k} coefficients")
    r = np.zeros(R.shape[0]) if r is None else np.atleast_1d(np.asarray(r, dtype=float))
    diff = R @ system.params - r
    V = R @ system.vcov @ R.T
    if np.linalg.matrix_rank(V) < V.shape[0]:
        raise EstimationError("restrictions are linearly dependent (R V R' is singular)")
    stat = float(diff @ np.linalg.solve(V, diff))
    df = R.shape[0]
    p = float(stats.chi2.sf(stat, df))
    adj = min(1.0, p * bonferroni) if bonferroni else None
    return TestResult(stat, df, p, adj)


def restriction_rows(system: SurSystem, terms: Sequence[tuple[str, str]]) -> np.ndarray:
    """Selector rows picking ``(outcome, regressor)`` coefficients."""
    R = np.zeros((len(terms), len(system.params)))
    for i, (y, x) in enumerate(terms):
        R[i, system.index(y, x)] = 1.0
    return R


def zero_tests(system: SurSystem, regressor: str) -> dict:
    """Individual (Bonferroni-adjusted) and joint zero tests of one regressor across equations."""
    terms = [(y, regressor) for y in system.outcomes]
    R = restriction_rows(system, terms)
    m = len(terms)
    individual = {y: cross_equation_wald(system, R[[i]], bonferroni=m)
                  for i, (y, _) in enumerate(terms)}
    return {"individual": individual, "joint": cross_equation_wald(system, R)}


def signed_equality_test(system: SurSystem, regressor: str, signs: Sequence[float]) -> TestResult:
    """Test ``s_1 b_1 = s_2 b_2 = ... = s_m b_m`` for one regressor across equations."""
    terms = [(y, regressor) for y in system.outcomes]
    if len(signs) != len(terms):
        raise DataError("one sign per equation is required")
    S = restriction_rows(system, terms) * np.asarray(signs, dtype=float)[:, None]
    R = S[[0]] - S[1:]
    return cross_equation_wald(system, R)
