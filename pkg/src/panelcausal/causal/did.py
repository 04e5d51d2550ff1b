"""Difference-in-differences estimators and permutation inference."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .._parallel import pmap
from ..errors import ConfigError, DataError, EstimationError
from ..panel import PanelDataset
from ..regress import Absorber, FixedEffectSpec, RegressionResult, group_codes, ols_cluster
from ..regress.ols import independent_columns

logger = logging.getLogger(__name__)

DEFAULT_CONTROLS = ("Size", "Lev", "ROA", "Liquid", "Top5", "TobinQ", "ListAge")
FOUR_WAY = FixedEffectSpec(("firm_id", "year", ("industry", "year"), ("province", "year")))


@dataclass(frozen=True)
class DidSpec:
    """Specification of a two-group, single-shock DID regression.

    The regressor of interest, named ``interaction_name``, is
    ``treat * 1[year >= policy_year]``. Each column in
    ``interaction_terms`` adds a main effect and its product with the
    regressor of interest.
    """

    outcome: str = "DebtFC"
    treat: str = "Treat"
    policy_year: int = 2021
    controls: tuple = DEFAULT_CONTROLS
    fe: FixedEffectSpec = FOUR_WAY
    cluster: str | None = "firm_id"
    interaction_terms: tuple = ()
    interaction_name: str = "AIWashing"

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "interaction_terms", tuple(self.interaction_terms))
        if isinstance(self.fe, dict):
            object.__setattr__(self, "fe", FixedEffectSpec(**self.fe))
        elif not isinstance(self.fe, FixedEffectSpec):
            object.__setattr__(self, "fe", FixedEffectSpec(tuple(self.fe)))

    def validate(self, data: PanelDataset) -> None:
        problems = [f"column {c!r} not in data"
                    for c in (self.outcome, self.treat, *self.controls, *self.interaction_terms)
                    if c not in data]
        if self.cluster is not None and self.cluster not in data:
            problems.append(f"cluster key {self.cluster!r} not in data")
        if problems:
            raise DataError("; ".join(problems))
        t = pd.Series(data.column(self.treat)).groupby(data.key("firm_id")).nunique()
        if (t > 1).any():
            raise DataError(f"treatment {self.treat!r} varies within firm "
                            f"(e.g. firm {t.index[t > 1][0]})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fe"] = self.fe.to_dict()
        d["controls"] = list(self.controls)
        d["interaction_terms"] = list(self.interaction_terms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DidSpec":
        d = dict(d)
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError([f"unknown DID key {k!r}" for k in unknown])
        if "fe" in d and isinstance(d["fe"], dict):
            fe = dict(d["fe"])
            fe["dimensions"] = tuple(_parse_dim(x) for x in fe.get("dimensions", ()))
            d["fe"] = FixedEffectSpec(**fe)
        elif "fe" in d:
            d["fe"] = FixedEffectSpec(tuple(_parse_dim(x) for x in d["fe"]))
        return cls(**d)


def _parse_dim(x):
    if isinstance(x, str) and "#" in x:
        return tuple(x.split("#"))
    return tuple(x) if isinstance(x, list) else x


def _weight_array(weights, n):
    if weights is None:
        return None
    w = getattr(weights, "weights", weights)
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise DataError(f"weights have shape {w.shape}, expected ({n},)")
    return w


def treatment_term(data: PanelDataset, spec: DidSpec) -> np.ndarray:
    """``Treat_i * Post_t`` per row (NaN where treatment is missing)."""
    post = (data.key("year") >= spec.policy_year).astype(float)
    return data.column(spec.treat) * post


def _fit(data, spec, regressors, names, weights=None) -> RegressionResult:
    y = data.column(spec.outcome)
    X = np.column_stack(regressors + [data.column(c) for c in spec.controls])
    cluster = None if spec.cluster is None else data.key(spec.cluster)
    return ols_cluster(y, X, spec.fe.codes(data), cluster,
                       names=list(names) + list(spec.controls),
                       weights=_weight_array(weights, data.n_rows),
                       tolerance=spec.fe.tolerance, max_iterations=spec.fe.max_iterations)


def did_estimate(data: PanelDataset, spec: DidSpec, weights=None,
                 demean_moderators: bool = False) -> RegressionResult:
    """Two-way (or higher) fixed-effects DID with cluster-robust inference.

    Regressor order is the treatment term, then for each moderator ``M``
    in ``spec.interaction_terms`` the product ``D*M`` and ``M``, then the
    controls. ``weights`` is a :class:`WeightVector` or a row-aligned array.
    """
    spec.validate(data)
    d = treatment_term(data, spec)
    regs, names = [d], [spec.interaction_name]
    for m in spec.interaction_terms:
        mv = data.column(m)
        if demean_moderators:
            mv = mv - np.nanmean(mv)
        regs += [d * mv, mv]
        names += [f"{spec.interaction_name}_x_{m}", m]
    return _fit(data, spec, regs, names, weights)


def moderated_did(data: PanelDataset, spec: DidSpec, moderator: str,
                  demean_moderator: bool = False, weights=None) -> RegressionResult:
    """DID with a moderator main effect and its interaction with the treatment term."""
    return did_estimate(data, replace(spec, interaction_terms=(moderator,)), weights,
                        demean_moderators=demean_moderator)


# ---------------------------------------------------------------------------
# event study


@dataclass
class EventStudyResult:
    taus: list[int]
    coef: np.ndarray
    se: np.ndarray
    ci: np.ndarray  # (len(taus), 2)
    pvalues: np.ndarray
    omitted: int
    regression: RegressionResult

    def __getitem__(self, tau: int) -> float:
        return float(self.coef[self.taus.index(tau)])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"tau": self.taus, "coef": self.coef, "se": self.se,
                             "ci_low": self.ci[:, 0], "ci_high": self.ci[:, 1],
                             "p": self.pvalues})

    def to_dict(self) -> dict:
        return {"omitted": self.omitted,
                "coefficients": {str(t): {"estimate": float(b), "se": float(s),
                                          "ci": [float(lo), float(hi)], "p": float(p)}
                                 for t, b, s, (lo, hi), p in zip(self.taus, self.coef, self.se,
                                                                 self.ci, self.pvalues)},
                "fit": {"n_obs": self.regression.n_obs,
                        "n_clusters": self.regression.n_clusters}}


def event_name(tau: int) -> str:
    return f"tau{tau:+d}"


def event_study(data: PanelDataset, spec: DidSpec, window: tuple[int, int] = (-4, 3),
                omitted: int = -1, weights=None, level: float = 0.95) -> EventStudyResult:
    """Dynamic DID with one treatment indicator per event time.

    Event time is ``year - policy_year``. Years outside ``window`` have no
    indicator and so join the omitted period in the reference group.
    """
    spec.validate(data)
    lo, hi = window
    if not lo <= omitted <= hi:
        raise DataError(f"omitted period {omitted} outside window {window}")
    treat = data.column(spec.treat)
    rel = data.key("year") - spec.policy_year
    y_ok = np.isfinite(data.column(spec.outcome))
    taus = [t for t in range(lo, hi + 1) if t != omitted]
    regs = []
    for t in taus:
        ind = treat * (rel == t)
        if not np.nansum(ind[y_ok]) > 0:
            raise DataError(f"event time {t} has no treated observations")
        regs.append(ind)
    res = _fit(data, spec, regs, [event_name(t) for t in taus], weights)
    coef = np.array([res.coef(event_name(t)) for t in taus])
    se = np.array([res.se(event_name(t)) for t in taus])
    ci = np.array([res.conf_int(event_name(t), level) for t in taus])
    p = np.array([res.pvalue(event_name(t)) for t in taus])
    return EventStudyResult(taus, coef, se, ci, p, omitted, res)


# ---------------------------------------------------------------------------
# placebo permutation


@dataclass
class PlaceboResult:
    actual: float
    draws: np.ndarray  # NaN for skipped draws
    seed: int
    skipped: list[int] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return self.draws[np.isfinite(self.draws)]

    @property
    def p_value(self) -> float:
        """Share of placebo estimates at least as extreme as the actual one."""
        v = self.valid
        return float(np.mean(np.abs(v) >= abs(self.actual))) if len(v) else np.nan

    @property
    def rank(self) -> float:
        """Mid-rank quantile of the actual estimate within the placebo draws."""
        v = self.valid
        return float((np.sum(v < self.actual) + 0.5 * np.sum(v == self.actual)) / len(v))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"draw": np.arange(len(self.draws)), "beta": self.draws})

    def to_dict(self) -> dict:
        v = self.valid
        return {"actual": self.actual, "n_perm": len(self.draws), "n_valid": int(len(v)),
                "skipped": list(self.skipped), "p_value": self.p_value, "seed": self.seed,
                "placebo_mean": float(v.mean()) if len(v) else None,
                "placebo_sd": float(v.std(ddof=1)) if len(v) > 1 else None}


def placebo_permutation(data: PanelDataset, spec: DidSpec, n_perm: int = 1000, seed: int = 0,
                        workers: int = 1, chunk: int = 50) -> PlaceboResult:
    """Randomization inference: reshuffle firm treatment labels and re-estimate.

    Draw ``i`` uses the generator seeded by ``(seed, i)``, so results do
    not depend on ``workers`` or ``chunk``. Each permuted coefficient is
    computed by partialling the absorbed outcome and controls out once
    and projecting the absorbed placebo treatment on them.
    """
    if n_perm < 1:
        raise DataError("n_perm must be at least 1")
    actual = did_estimate(data, spec)
    beta = actual.coef(spec.interaction_name)
    ok = actual.sample
    firm = data.key("firm_id")[ok]
    post = (data.key("year")[ok] >= spec.policy_year).astype(float)
    treat = data.column(spec.treat)[ok]
    firms, pos = np.unique(firm, return_inverse=True)
    treat_f = pd.Series(treat).groupby(pos).first().to_numpy()

    codes = [group_codes(c[ok]) for c in spec.fe.codes(data).values()]
    absorber = Absorber(codes, None, spec.fe.tolerance, spec.fe.max_iterations)
    y = data.column(spec.outcome)[ok]
    C = np.column_stack([data.column(c)[ok] for c in spec.controls]) if spec.controls \
        else np.zeros((ok.sum(), 0))
    Z = absorber.demean(np.column_stack([y, C]))
    yt, Ct = Z[:, 0], Z[:, 1:]
    if Ct.shape[1]:
        Ct = Ct[:, independent_columns(Ct)]
        Q, _ = np.linalg.qr(Ct)
    else:
        Q = np.zeros((len(yt), 0))
    y_r = yt - Q @ (Q.T @ yt)

    def run(block):
        D = np.empty((len(pos), len(block)))
        for j, i in enumerate(block):
            rng = np.random.default_rng([seed, i])
            D[:, j] = treat_f[rng.permutation(len(treat_f))][pos] * post
        Dt = absorber.demean(D)
        Dr = Dt - Q @ (Q.T @ Dt)
        den = (Dr * Dr).sum(axis=0)
        scale = (D * D).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            b = (Dr.T @ y_r) / den
        b[den <= 1e-12 * np.maximum(scale, 1.0)] = np.nan
        return b

    blocks = [list(range(s, min(s + chunk, n_perm))) for s in range(0, n_perm, chunk)]
    draws = np.concatenate(pmap(run, blocks, workers))
    skipped = [int(i) for i in np.flatnonzero(~np.isfinite(draws))]
    if skipped:
        logger.warning("placebo: %d draws skipped (treatment absorbed by fixed effects)",
                       len(skipped))
    return PlaceboResult(float(beta), draws, seed, skipped)


# ---------------------------------------------------------------------------
# split-sample comparison


@dataclass
class SubsampleResult:
    split: str
    low: RegressionResult
    high: RegressionResult
    difference: float
    p_value: float | None
    draws: np.ndarray
    n_firms: tuple[int, int]
    interaction_name: str = "AIWashing"

    def to_dict(self) -> dict:
        name = self.interaction_name
        return {"split": self.split, "n_firms": {"low": self.n_firms[0], "high": self.n_firms[1]},
                "low": {"estimate": self.low.coef(name), "se": self.low.se(name),
                        "p": self.low.pvalue(name), "n_obs": self.low.n_obs},
                "high": {"estimate": self.high.coef(name), "se": self.high.se(name),
                         "p": self.high.pvalue(name), "n_obs": self.high.n_obs},
                "difference": self.difference, "empirical_p": self.p_value,
                "n_perm": int(len(self.draws))}


def split_groups(data: PanelDataset, split: str, policy_year: int) -> pd.Series:
    """Per-firm indicator of an above-median pre-period mean of ``split``."""
    if split not in data:
        raise DataError(f"split column {split!r} not in data")
    pre = data.key("year") < policy_year
    means = pd.Series(data.column(split)[pre]).groupby(data.key("firm_id")[pre]).mean().dropna()
    if len(means) < 4:
        raise EstimationError(f"too few firms with pre-period {split!r} to split")
    return (means > means.median()).astype(int)


def subsample_compare(data: PanelDataset, spec: DidSpec, split: str, n_perm: int = 1000,
                      seed: int = 0, workers: int = 1) -> SubsampleResult:
    """Estimate the DID separately below and above the median of ``split``.

    The empirical p-value is the share of label permutations (group sizes
    fixed) whose absolute coefficient gap is at least the observed one.
    ``n_perm = 0`` skips inference.
    """
    groups = split_groups(data, split, spec.policy_year)
    firm = data.key("firm_id")
    firms = groups.index.to_numpy()
    labels = groups.to_numpy()
    name = spec.interaction_name

    def fit_pair(lab):
        g = pd.Series(lab, index=firms).reindex(firm).to_numpy()
        try:
            lo = did_estimate(data.subset(g == 0), spec)
            hi = did_estimate(data.subset(g == 1), spec)
        except EstimationError as exc:
            raise EstimationError(f"subsample on {split!r} too small to estimate: {exc}") from exc
        return lo, hi

    low, high = fit_pair(labels)
    diff = low.coef(name) - high.coef(name)

    def one(i):
        rng = np.random.default_rng([seed, i])
        try:
            lo, hi = fit_pair(labels[rng.permutation(len(labels))])
            return lo.coef(name) - hi.coef(name)
        except EstimationError:
            return np.nan

    draws = np.array(pmap(one, range(n_perm), workers), dtype=float)
    valid = draws[np.isfinite(draws)]
    p = float(np.mean(np.abs(valid) >= abs(diff))) if n_perm and len(valid) else None
    return SubsampleResult(split, low, high, float(diff), p, draws,
                           (int((labels == 0).sum()), int((labels == 1).sum())), name)


def ks_uniform(ranks: Sequence[float]) -> float:
    """p-value of a Kolmogorov-Smirnov test of ``ranks`` against U(0, 1)."""
    return float(stats.kstest(np.asarray(ranks, dtype=float), "uniform").pvalue)
