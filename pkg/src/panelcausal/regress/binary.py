"""Probit and logit maximum likelihood with average marginal effects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special, stats

from ..errors import ConvergenceError, EstimationError, SeparationError
from .ols import cluster_meat, stars


class _Link:
    name: str

    def cdf(self, z):
        raise NotImplementedError

    def pdf(self, z):
        raise NotImplementedError

    def dpdf(self, z):
        raise NotImplementedError


class _Probit(_Link):
    name = "probit"

    def cdf(self, z):
        return special.ndtr(z)

    def pdf(self, z):
        return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

    def dpdf(self, z):
        return -z * self.pdf(z)

    def loglik_terms(self, z, y):
        return np.where(y > 0, special.log_ndtr(z), special.log_ndtr(-z))

    def score_weights(self, z, y):
        # d loglik / d z
        lam1 = np.exp(-0.5 * z * z - special.log_ndtr(z)) / np.sqrt(2 * np.pi)
        lam0 = np.exp(-0.5 * z * z - special.log_ndtr(-z)) / np.sqrt(2 * np.pi)
        return np.where(y > 0, lam1, -lam0)

    def hessian_weights(self, z, y):
        # -d2 loglik / dz2, always positive for probit
        g = self.score_weights(z, y)
        return g * (g + z)


class _Logit(_Link):
    name = "logit"

    def cdf(self, z):
        return special.expit(z)

    def pdf(self, z):
        p = special.expit(z)
        return p * (1 - p)

    def dpdf(self, z):
        p = special.expit(z)
        return p * (1 - p) * (1 - 2 * p)

    def loglik_terms(self, z, y):
        return np.where(y > 0, -np.logaddexp(0, -z), -np.logaddexp(0, z))

    def score_weights(self, z, y):
        return y - special.expit(z)

    def hessian_weights(self, z, y):
        return self.pdf(z)


LINKS = {"probit": _Probit(), "logit": _Logit()}


@dataclass
class MleResult:
    names: list[str]
    params: np.ndarray
    vcov: np.ndarray
    log_likelihood: float
    log_likelihood_null: float
    pseudo_r2: float
    link: str
    converged: bool
    iterations: int
    n_obs: int
    n_clusters: int | None
    add_constant: bool
    sample: np.ndarray
    gradient_norm: float = 0.0
    vcov_type: str = "cluster"

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.params))

    @property
    def bse(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def zvalues(self):
        return self.params / self.bse

    @property
    def pvalues(self):
        return 2 * stats.norm.sf(np.abs(self.zvalues))

    def coef(self, name):
        return float(self.params[self.names.index(name)])

    def design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.add_constant:
            X = np.column_stack([np.ones(len(X)), X])
        return X

    def linear_index(self, X) -> np.ndarray:
        return self.design(X) @ self.params

    def predict(self, X) -> np.ndarray:
        return LINKS[self.link].cdf(self.linear_index(X))

    def to_dict(self) -> dict:
        table = {n: {"estimate": float(b), "se": float(s), "z": float(z), "p": float(p),
                     "stars": stars(p)}
                 for n, b, s, z, p in zip(self.names, self.params, self.bse, self.zvalues,
                                          self.pvalues)}
        return {"coefficients": table, "link": self.link,
                "fit": {"n_obs": self.n_obs, "n_clusters": self.n_clusters,
                        "log_likelihood": self.log_likelihood, "pseudo_r2": self.pseudo_r2,
                        "converged": self.converged, "iterations": self.iterations}}


def binary_mle(y, X, link: str = "probit", cluster=None, *, names: Sequence[str] | None = None,
               add_constant: bool = True, tol: float = 1e-8, step_tol: float = 1e-10,
               max_iter: int = 200) -> MleResult:
    """Fit a probit or logit model by Newton-Raphson.

    Iterates until the max-norm of the score falls below ``tol`` or the
    Newton step below ``step_tol``. The covariance is the cluster-robust
    sandwich with a ``G/(G-1)`` factor when ``cluster`` is given, else the
    inverse information matrix. Perfect separation raises
    :class:`SeparationError`.
    """
    if link not in LINKS:
        raise EstimationError(f"unknown link {link!r}")
    lk = LINKS[link]
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if add_constant:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["_cons"] + names
    ok = np.isfinite(y) & np.isfinite(X).all(axis=1)
    if cluster is not None:
        cluster = np.asarray(cluster)
    ys, Xs = y[ok], X[ok]
    if not set(np.unique(ys)) <= {0.0, 1.0}:
        raise EstimationError("binary outcome must be coded 0/1")
    if ys.min() == ys.max():
        raise EstimationError("binary outcome has a single class")
    if np.linalg.matrix_rank(Xs) < Xs.shape[1]:
        raise EstimationError("regressor matrix is not of full column rank")

    def loglik(b):
        return float(lk.loglik_terms(Xs @ b, ys).sum())

    beta = np.zeros(Xs.shape[1])
    ll = loglik(beta)
    converged = False
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        z = Xs @ beta
        g = Xs.T @ lk.score_weights(z, ys)
        grad_norm = float(np.abs(g).max())
        if grad_norm < tol:
            converged = True
            break
        _check_separation(z, ys)
        H = (Xs * lk.hessian_weights(z, ys)[:, None]).T @ Xs
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-8:
                break
            t /= 2
        beta, ll = cand, ll_new
        if np.abs(t * step).max() < step_tol:
            z = Xs @ beta
            grad_norm = float(np.abs(Xs.T @ lk.score_weights(z, ys)).max())
            converged = True
            break
    if not converged:
        _check_separation(Xs @ beta, ys, strict=False)
        raise ConvergenceError(f"{link} did not converge in {max_iter} iterations "
                               f"(score max-norm {grad_norm:.3g})")

    z = Xs @ beta
    # a finite optimum can never classify every observation correctly
    _check_separation(z, ys, strict=False)
    H = (Xs * lk.hessian_weights(z, ys)[:, None]).T @ Xs
    bread = np.linalg.inv(H)
    if cluster is not None:
        clus = cluster[ok]
        G = len(np.unique(clus))
        if G < 2:
            raise EstimationError("cluster-robust covariance needs at least 2 clusters")
        scores = Xs * lk.score_weights(z, ys)[:, None]
        vcov = G / (G - 1) * bread @ cluster_meat(scores, clus) @ bread
        vtype = "cluster"
    else:
        G = None
        vcov = bread
        vtype = "oim"
    vcov = (vcov + vcov.T) / 2
    pbar = ys.mean()
    ll0 = float(len(ys) * (pbar * np.log(pbar) + (1 - pbar) * np.log(1 - pbar)))
    return MleResult(names=names, params=beta, vcov=vcov, log_likelihood=ll,
                     log_likelihood_null=ll0, pseudo_r2=1 - ll / ll0, link=link,
                     converged=True, iterations=it, n_obs=int(ok.sum()), n_clusters=G,
                     add_constant=add_constant, sample=ok, gradient_norm=grad_norm,
                     vcov_type=vtype)


def _check_separation(z, y, strict=True):
    margin = np.where(y > 0, z, -z)
    if (margin > 0).all() and (strict is False or margin.min() > 6):
        raise SeparationError("outcome is perfectly separated by the regressors; "
                              "coefficients diverge")


@dataclass
class MarginalEffects:
    names: list[str]
    effects: np.ndarray
    se: np.ndarray
    discrete: list[bool] = field(default_factory=list)

    @property
    def pvalues(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return 2 * stats.norm.sf(np.abs(self.effects / self.se))

    def as_dict(self) -> dict:
        return {n: {"ame": float(e), "se": float(s), "p": float(p), "stars": stars(p)}
                for n, e, s, p in zip(self.names, self.effects, self.se, self.pvalues)}

    def __getitem__(self, name):
        return float(self.effects[self.names.index(name)])


def _is_binary(col: np.ndarray) -> bool:
    vals = np.unique(col[np.isfinite(col)])
    return len(vals) == 2 and set(vals) == {0.0, 1.0}


def marginal_effects(m: MleResult, X) -> MarginalEffects:
    """Average marginal effects with delta-method standard errors.

    Continuous regressors use the average density-scaled coefficient;
    0/1 regressors use the average discrete change in the predicted
    probability when switching the regressor from 0 to 1.
    """
    if not m.converged:
        raise EstimationError("marginal effects need a converged model")
    lk = LINKS[m.link]
    D = m.design(X)
    D = D[np.isfinite(D).all(axis=1)]
    b = m.params
    start = 1 if m.add_constant else 0
    names, eff, ses, disc = [], [], [], []
    z = D @ b
    for j in range(start, D.shape[1]):
        if _is_binary(D[:, j]):
            D1, D0 = D.copy(), D.copy()
            D1[:, j], D0[:, j] = 1.0, 0.0
            z1, z0 = D1 @ b, D0 @ b
            ame = float(np.mean(lk.cdf(z1) - lk.cdf(z0)))
            grad = (lk.pdf(z1)[:, None] * D1 - lk.pdf(z0)[:, None] * D0).mean(axis=0)
            disc.append(True)
        else:
            f = lk.pdf(z)
            ame = float(f.mean() * b[j])
            grad = b[j] * (lk.dpdf(z)[:, None] * D).mean(axis=0)
            grad[j] += f.mean()
            disc.append(False)
        names.append(m.names[j])
        eff.append(ame)
        ses.append(float(np.sqrt(max(grad @ m.vcov @ grad, 0.0))))
    return MarginalEffects(names, np.array(eff), np.array(ses), disc)


def inverse_mills(index) -> np.ndarray:
    """phi(z) / Phi(z), computed in log space for stability in the lower tail."""
    z = np.asarray(index, dtype=float)
    return np.exp(-0.5 * z * z - 0.5 * np.log(2 * np.pi) - special.log_ndtr(z))
