"""Least squares with absorbed fixed effects and cluster-robust covariance."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from ..errors import EstimationError
from .absorb import Absorber, absorbed_degrees, group_codes, singleton_mask

logger = logging.getLogger(__name__)


class CollinearityWarning(UserWarning):
    pass


def stars(p: float) -> str:
    if p is None or not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


@dataclass
class RegressionResult:
    names: list[str]
    params: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray  # full input length, NaN on rows not in the estimation sample
    sample: np.ndarray  # boolean mask over input rows
    n_obs: int
    n_clusters: int | None
    r2: float
    adj_r2: float
    r2_within: float
    df_resid: int
    df_fe: int
    dropped_singletons: int = 0
    dropped_columns: list[str] = field(default_factory=list)
    absorbed_dims: list[str] = field(default_factory=list)
    vcov_type: str = "cluster"

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.params))

    @property
    def bse(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def tvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.bse

    @property
    def df_inference(self) -> int:
        return self.n_clusters - 1 if self.n_clusters else self.df_resid

    @property
    def pvalues(self) -> np.ndarray:
        return 2 * stats.t.sf(np.abs(self.tvalues), self.df_inference)

    def _index(self, name: str) -> int:
        if name not in self.names:
            if name in self.dropped_columns:
                raise EstimationError(f"coefficient {name!r} was dropped as collinear")
            raise KeyError(name)
        return self.names.index(name)

    def coef(self, name: str) -> float:
        return float(self.params[self._index(name)])

    def se(self, name: str) -> float:
        return float(self.bse[self._index(name)])

    def pvalue(self, name: str) -> float:
        return float(self.pvalues[self._index(name)])

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        q = stats.t.ppf(0.5 + level / 2, self.df_inference)
        b, s = self.coef(name), self.se(name)
        return b - q * s, b + q * s

    def to_dict(self) -> dict:
        table = {}
        for name, b, s, t, p in zip(self.names, self.params, self.bse, self.tvalues, self.pvalues):
            table[name] = {"estimate": float(b), "se": float(s), "t": float(t),
                           "p": float(p), "stars": stars(p)}
        return {
            "coefficients": table,
            "fit": {"n_obs": self.n_obs, "n_clusters": self.n_clusters, "r2": self.r2,
                    "adj_r2": self.adj_r2, "r2_within": self.r2_within,
                    "df_resid": self.df_resid, "vcov": self.vcov_type},
            "fixed_effects": {"absorbed": list(self.absorbed_dims), "df_fe": self.df_fe,
                              "dropped_singletons": self.dropped_singletons},
            "dropped_columns": list(self.dropped_columns),
        }


def independent_columns(X: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Indices of columns kept by ordered elimination of linear dependence.

    A column is dropped when it is (numerically) spanned by the columns
    kept before it, so earlier columns take priority.
    """
    kept: list[int] = []
    Q = np.zeros((X.shape[0], 0))
    for j in range(X.shape[1]):
        col = X[:, j]
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        resid = col - Q @ (Q.T @ col)
        resid = resid - Q @ (Q.T @ resid)
        rnorm = np.linalg.norm(resid)
        if rnorm / norm > tol:
            kept.append(j)
            Q = np.column_stack([Q, resid / rnorm])
    return kept


def cluster_meat(scores: np.ndarray, cluster: np.ndarray | None) -> np.ndarray:
    """Sum over clusters of outer products of within-cluster score sums."""
    if cluster is None:
        return scores.T @ scores
    codes = group_codes(cluster)
    sums = np.zeros((codes.max() + 1, scores.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums


def ols_cluster(y, X, fe: Mapping[str, np.ndarray] | None = None, cluster=None, *,
                names: Sequence[str] | None = None, weights=None,
                add_constant: bool | None = None, tolerance: float = 1e-10,
                max_iterations: int = 10_000, drop_singletons: bool = True) -> RegressionResult:
    """OLS (or WLS) of ``y`` on ``X`` with fixed effects absorbed.

    Parameters
    ----------
    y : array (n,)
    X : array (n, k)
    fe : mapping of dimension label to group codes, or None
    cluster : array (n,) of cluster keys, or None for HC1
    weights : array (n,) of non-negative weights, or None
    add_constant : include an intercept column; defaults to True when no
        fixed effects are absorbed

    Rows with any missing input or zero weight are left out. Columns that
    become collinear after absorption are dropped with a warning. The
    covariance is the CR1 sandwich with factor ``G/(G-1) * (N-1)/(N-K)``,
    where ``K`` omits fixed effects nested within clusters.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(y)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    fe = dict(fe or {})
    if add_constant is None:
        add_constant = not fe
    if add_constant:
        X = np.column_stack([np.ones(n), X])
        names = ["_cons"] + names
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise EstimationError("regression weights must be non-negative")
    ok = np.isfinite(y) & np.isfinite(X).all(axis=1) & np.isfinite(w) & (w > 0)
    codes = [np.asarray(c) for c in fe.values()]
    n_single = 0
    if codes and drop_singletons:
        keep = ok.copy()
        keep[ok] = singleton_mask([group_codes(c[ok]) for c in codes])
        n_single = int(ok.sum() - keep.sum())
        ok = keep
    if ok.sum() == 0:
        raise EstimationError("no observations left to estimate")
    ys, Xs, ws = y[ok], X[ok], w[ok]
    clus = None if cluster is None else np.asarray(cluster)[ok]
    sub_codes = [group_codes(c[ok]) for c in codes]

    if sub_codes:
        absorber = Absorber(sub_codes, ws, tolerance, max_iterations)
        Z = absorber.demean(np.column_stack([ys, Xs]))
        yt, Xt = Z[:, 0], Z[:, 1:]
        df_fe = absorbed_degrees(sub_codes)
        df_fe_vcov = absorbed_degrees(sub_codes, clus) if clus is not None else df_fe
    else:
        yt, Xt = ys, Xs
        df_fe = df_fe_vcov = 0

    sw = np.sqrt(ws)
    ytw, Xtw = yt * sw, Xt * sw[:, None]
    tss_within = float(ytw @ ytw)
    if tss_within <= 1e-14 * max(1.0, float((ys * ys * ws).sum())):
        raise EstimationError("outcome has no variation left after absorbing fixed effects")

    kept = independent_columns(Xtw) if Xtw.shape[1] else []
    dropped = [names[j] for j in range(len(names)) if j not in kept]
    if dropped:
        msg = f"dropping collinear regressors: {dropped}"
        logger.warning(msg)
        warnings.warn(msg, CollinearityWarning, stacklevel=2)
    Xk = Xtw[:, kept]
    kept_names = [names[j] for j in kept]
    N, K = Xk.shape
    if K:
        beta, *_ = np.linalg.lstsq(Xk, ytw, rcond=None)
        bread = np.linalg.inv(Xk.T @ Xk)
    else:
        beta = np.zeros(0)
        bread = np.zeros((0, 0))
    resid_w = ytw - Xk @ beta
    resid = resid_w / sw

    df_resid = N - K - df_fe
    if df_resid < 0:
        raise EstimationError("no residual degrees of freedom")
    exact = df_resid == 0
    if exact:
        msg = "model is exactly identified; covariance is undefined"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    scores = Xk * resid_w[:, None]
    if clus is not None:
        G = len(np.unique(clus))
        if G < 2:
            raise EstimationError("cluster-robust covariance needs at least 2 clusters")
        factor = G / (G - 1) * (N - 1) / max(N - K - df_fe_vcov, 1)
        meat = cluster_meat(scores, clus)
        vtype = "cluster"
    else:
        G = None
        factor = N / max(df_resid, 1)
        meat = scores.T @ scores
        vtype = "HC1"
    vcov = factor * bread @ meat @ bread
    vcov = (vcov + vcov.T) / 2
    if exact:
        vcov = np.full_like(vcov, np.nan)

    ssr = float(resid_w @ resid_w)
    ybar = np.average(ys, weights=ws)
    tss = float(((ys - ybar) ** 2 * ws).sum())
    r2 = 1 - ssr / tss if tss > 0 else np.nan
    k_total = K + df_fe
    adj = 1 - (1 - r2) * (N - 1) / (N - k_total) if N > k_total else np.nan
    full_resid = np.full(n, np.nan)
    full_resid[ok] = resid
    return RegressionResult(
        names=kept_names, params=beta, vcov=vcov, residuals=full_resid, sample=ok,
        n_obs=N, n_clusters=G, r2=float(r2), adj_r2=float(adj),
        r2_within=float(1 - ssr / tss_within), df_resid=int(df_resid), df_fe=int(df_fe),
        dropped_singletons=n_single, dropped_columns=dropped,
        absorbed_dims=list(fe.keys()), vcov_type=vtype)
