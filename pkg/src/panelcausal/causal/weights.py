"""Reweighting estimators: propensity-score matching and entropy balancing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, sparse, special

from ..errors import ConvergenceError, DataError, EstimationError, InfeasibleError
from ..panel import PanelDataset
from ..regress import binary_mle

logger = logging.getLogger(__name__)


def _as_frame(data) -> pd.DataFrame:
    return data._frame if isinstance(data, PanelDataset) else data


def _treat_and_covars(data, treat: str, covars: Sequence[str]):
    frame = _as_frame(data)
    missing = [c for c in (treat, *covars) if c not in frame.columns]
    if missing:
        raise DataError(f"columns not in data: {missing}")
    t = frame[treat].to_numpy(dtype=float, na_value=np.nan)
    X = frame[list(covars)].to_numpy(dtype=float, na_value=np.nan)
    return t, X


@dataclass
class WeightVector:
    """Per-row weights from matching or balancing.

    ``diagnostics`` holds the standardized bias of every covariate before
    and after weighting.
    """

    weights: np.ndarray
    method: str
    diagnostics: pd.DataFrame | None = None
    unmatched: list = field(default_factory=list)
    matches: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    score: np.ndarray | None = None

    def __len__(self):
        return len(self.weights)

    def to_dict(self) -> dict:
        out = {"method": self.method, "n": int(len(self.weights)),
               "n_positive": int((self.weights > 0).sum()),
               "sum": float(self.weights.sum()), **self.info}
        if self.method == "psm":
            out["n_unmatched"] = len(self.unmatched)
        if self.diagnostics is not None:
            out["balance"] = {c: {k: float(v) for k, v in row.items()}
                              for c, row in self.diagnostics.iterrows()}
        return out


# ---------------------------------------------------------------------------
# balance


def standardized_bias(t, X, weights=None) -> np.ndarray:
    """100 * (treated mean - control mean) / pooled unweighted SD, per column."""
    t = np.asarray(t, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    tr, co = t == 1, t == 0
    var_t = X[tr].var(axis=0, ddof=1)
    var_c = X[co].var(axis=0, ddof=1)
    pooled = np.sqrt((var_t + var_c) / 2)
    if (pooled <= 0).any():
        raise EstimationError("standardized bias undefined: zero pooled variance")
    if weights is None:
        m_t, m_c = X[tr].mean(axis=0), X[co].mean(axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        if w[tr].sum() <= 0 or w[co].sum() <= 0:
            raise EstimationError("weights leave a group with zero total mass")
        m_t = np.average(X[tr], axis=0, weights=w[tr])
        m_c = np.average(X[co], axis=0, weights=w[co])
    return 100 * (m_t - m_c) / pooled


def balance_diagnostics(data, treat: str, covars: Sequence[str], weights=None) -> pd.DataFrame:
    """Standardized bias per covariate, before and (if weighted) after.

    Treated units are weighted too, so treated units dropped by a caliper
    leave the treated mean.
    """
    t, X = _treat_and_covars(data, treat, covars)
    ok = np.isfinite(t) & np.isfinite(X).all(axis=1)
    out = pd.DataFrame({"bias_before": standardized_bias(t[ok], X[ok])}, index=list(covars))
    if weights is not None:
        w = np.asarray(getattr(weights, "weights", weights), dtype=float)[ok]
        out["bias_after"] = standardized_bias(t[ok], X[ok], w)
    out.index.name = "covariate"
    return out


# ---------------------------------------------------------------------------
# propensity-score matching


def nearest_matches(score_t, score_c, ids_c, k: int, caliper: float,
                    rng: np.random.Generator | None = None) -> list[list[int]]:
    """Positions (into the controls) of the ``k`` nearest controls per treated unit.

    Controls farther than ``caliper`` are inadmissible. Equidistant controls
    are taken in ascending id order, or in random order when ``rng`` is given.
    """
    score_c = np.asarray(score_c, dtype=float)
    order_key = np.argsort(np.argsort(ids_c, kind="stable"), kind="stable")
    out = []
    for s in np.asarray(score_t, dtype=float):
        dist = np.abs(score_c - s)
        tie = rng.random(len(score_c)) if rng is not None else order_key
        cand = np.flatnonzero(dist <= caliper)
        cand = cand[np.lexsort((tie[cand], dist[cand]))]
        out.append([int(c) for c in cand[:k]])
    return out


def psm_match(data, treat: str, covars: Sequence[str], k: int = 2, caliper: float = 0.01,
              seed: int = 0, ties: str = "id", id_column: str = "firm_id") -> WeightVector:
    """k-nearest-neighbour matching with replacement on a logit propensity score.

    Each row is a unit. Matched treated units get weight 1 and unmatched
    ones weight 0; every match adds ``1/k`` to the control's weight. The
    caliper applies to the score itself.
    """
    if k < 1:
        raise DataError("k must be at least 1")
    if ties not in ("id", "random"):
        raise DataError("ties must be 'id' or 'random'")
    frame = _as_frame(data)
    t, X = _treat_and_covars(data, treat, covars)
    ok = np.isfinite(t) & np.isfinite(X).all(axis=1)
    if not ((t[ok] == 1).any() and (t[ok] == 0).any()):
        raise DataError("matching needs both treated and control units")
    ids = frame[id_column].to_numpy() if id_column in frame.columns else np.arange(len(frame))
    model = binary_mle(t[ok], X[ok], link="logit", names=list(covars))
    score = np.full(len(t), np.nan)
    score[ok] = model.predict(X[ok])
    tr = np.flatnonzero(ok & (t == 1))
    co = np.flatnonzero(ok & (t == 0))
    tr = tr[np.argsort(ids[tr], kind="stable")]
    rng = np.random.default_rng(seed) if ties == "random" else None
    found = nearest_matches(score[tr], score[co], ids[co], k, caliper, rng)
    w = np.zeros(len(t))
    matches, unmatched = {}, []
    for i, m in zip(tr, found):
        if not m:
            unmatched.append(ids[i])
            continue
        w[i] = 1.0
        w[co[m]] += 1.0 / k
        matches[ids[i]] = [ids[co[j]] for j in m]
    if len(unmatched) == len(tr):
        raise EstimationError(f"no treated unit has a control within caliper {caliper}")
    if unmatched:
        logger.info("psm: %d of %d treated units unmatched", len(unmatched), len(tr))
    diag = balance_diagnostics(frame, treat, covars, w)
    return WeightVector(w, "psm", diag, unmatched, matches,
                        {"k": k, "caliper": caliper, "n_treated": int(len(tr)),
                         "n_matched": int(len(tr) - len(unmatched)),
                         "pseudo_r2": model.pseudo_r2}, score)


# ---------------------------------------------------------------------------
# entropy balancing


def _check_interior(Xc: np.ndarray, target: np.ndarray) -> float:
    """Largest achievable minimum weight of a probability vector matching ``target``.

    Solves a sparse LP; a non-positive optimum means the target is outside
    the relative interior of the control convex hull, so no exponential
    tilt can hit it.
    """
    n, p = Xc.shape
    # variables: w_1..w_n, s ; maximize s subject to w_i >= s
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = sparse.hstack([sparse.vstack([sparse.csr_matrix(Xc.T), np.ones((1, n))]),
                          sparse.csr_matrix((p + 1, 1))]).tocsr()
    b_eq = np.append(target, 1.0)
    A_ub = sparse.hstack([-sparse.identity(n), np.ones((n, 1))]).tocsr()
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b_eq,
                           bounds=[(0, None)] * n + [(None, 1.0)], method="highs")
    if res.status != 0:
        return -np.inf
    return float(res.x[-1])


def entropy_weights(Xc, target, base=None, tol: float = 1e-8, max_iter: int = 200):
    """Minimum-KL weights on the rows of ``Xc`` whose weighted mean is ``target``.

    Returns ``(weights, gap, iterations)`` with weights summing to one.
    The dual ``log sum q exp(lambda'(x - target))`` is minimized by
    damped Newton steps on centred and scaled covariates.
    """
    Xc = np.asarray(Xc, dtype=float)
    if Xc.ndim == 1:
        Xc = Xc[:, None]
    target = np.atleast_1d(np.asarray(target, dtype=float))
    n, p = Xc.shape
    q = np.full(n, 1.0 / n) if base is None else np.asarray(base, dtype=float) / np.sum(base)
    if n < 2:
        raise InfeasibleError("entropy balancing needs at least two control units")
    lo, hi = Xc.min(axis=0), Xc.max(axis=0)
    if ((target < lo) | (target > hi) | ((target == lo) & (lo < hi))
            | ((target == hi) & (lo < hi))).any():
        raise InfeasibleError("treated moments lie outside the range of the control support")
    scale = Xc.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (Xc - target) / scale
    logq = np.log(q)

    def weights_of(lam):
        a = logq + Z @ lam
        return np.exp(a - special.logsumexp(a))

    def dual(lam):
        return special.logsumexp(logq + Z @ lam)

    lam = np.zeros(p)
    w = weights_of(lam)
    gap = np.abs(w @ Xc - target).max()
    for it in range(1, max_iter + 1):
        if gap < tol:
            return w, gap, it - 1
        g = w @ Z
        H = (Z * w[:, None]).T @ Z - np.outer(g, g)
        step = np.linalg.lstsq(H, g, rcond=None)[0]
        f0, t = dual(lam), 1.0
        while dual(lam - t * step) > f0 - 1e-4 * t * (g @ step) and t > 1e-12:
            t /= 2
        lam = lam - t * step
        w = weights_of(lam)
        gap = np.abs(w @ Xc - target).max()
    if gap < tol:
        return w, gap, max_iter
    if _check_interior(Xc, target) <= 1e-12:
        raise InfeasibleError("treated moments lie outside the interior of the control support")
    raise ConvergenceError(f"entropy balancing did not converge (moment gap {gap:.3g})")


def entropy_balance(data, treat: str, covars: Sequence[str], tol: float = 1e-8,
                    max_iter: int = 200) -> WeightVector:
    """Entropy-balancing weights matching control covariate means to the treated.

    Treated rows get weight 1 and control weights sum to the number of
    treated rows. Rows with missing inputs get weight 0.
    """
    t, X = _treat_and_covars(data, treat, covars)
    ok = np.isfinite(t) & np.isfinite(X).all(axis=1)
    tr, co = ok & (t == 1), ok & (t == 0)
    if not tr.any() or not co.any():
        raise DataError("entropy balancing needs both treated and control units")
    target = X[tr].mean(axis=0)
    wc, gap, it = entropy_weights(X[co], target, tol=tol, max_iter=max_iter)
    w = np.zeros(len(t))
    w[tr] = 1.0
    w[co] = wc * tr.sum()
    diag = balance_diagnostics(_as_frame(data), treat, covars, w)
    return WeightVector(w, "eb", diag, info={"moment_gap": float(gap), "iterations": it,
                                             "n_treated": int(tr.sum()),
                                             "n_control": int(co.sum())})


def entropy_balance_yearly(data: PanelDataset, treat: str, covars: Sequence[str],
                           years: Sequence[int], tol: float = 1e-8) -> WeightVector:
    """Balance each year separately, then give every row its firm's mean weight.

    Control weights are solved within each year in ``years``; a firm's
    weight is the average over the years it appears in. Firms never
    observed in those years keep weight 1 and are listed in
    ``info["unweighted_firms"]``.
    """
    years = sorted(set(int(y) for y in years))
    year = data.key("year")
    firm = data.key("firm_id")
    per_row = np.full(data.n_rows, np.nan)
    gaps = {}
    for y in years:
        rows = np.flatnonzero(year == y)
        if len(rows) == 0:
            continue
        wv = entropy_balance(data.subset(year == y), treat, covars, tol)
        per_row[rows] = wv.weights
        gaps[y] = wv.info["moment_gap"]
    firm_w = pd.Series(per_row).groupby(firm).mean()
    w = firm_w.reindex(firm).to_numpy()
    absent = sorted(pd.unique(firm[np.isnan(w)]).tolist(), key=str)
    if absent:
        logger.warning("entropy balancing: %d firms absent from balancing years keep weight 1",
                       len(absent))
    w = np.where(np.isnan(w), 1.0, w)
    diag = balance_diagnostics(data, treat, covars, w)
    return WeightVector(w, "eb", diag, info={"yearly_moment_gap": gaps,
                                             "moment_gap": max(gaps.values()) if gaps else None,
                                             "unweighted_firms": absent})
