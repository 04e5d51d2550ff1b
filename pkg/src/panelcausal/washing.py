"""Disclosure-decoupling residuals, treatment assignment and persistence diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DataError, EstimationError
from .panel import PanelDataset
from .regress import group_codes, ols_cluster

logger = logging.getLogger(__name__)

DEFAULT_CONTROLS = ("Size", "Lev", "ROA", "Liquid", "Top5", "TobinQ", "ListAge")
PATENT_COLUMNS = {"flow": "AIPatent", "stock": "AIPatentStock", "application": "AIPatentApp"}
MODES = ("mean", "strict", "single_year")
SCHEMES = ("raw", "standardized", "median_split", "terciles")


def decoupling_residuals(data: PanelDataset, pre_years: Iterable[int], patent_mode: str = "flow",
                         controls: Sequence[str] = DEFAULT_CONTROLS, word: str = "AIWord",
                         patent: str | None = None) -> np.ndarray:
    """Year-by-year cross-sectional residuals of AI disclosure on patenting.

    For each year in ``pre_years`` the disclosure column is regressed on
    the patent measure, the controls and industry fixed effects. Returns a
    row-aligned array: the residual on pre-period rows, NaN elsewhere or
    where an input is missing.
    """
    if patent is None:
        if patent_mode not in PATENT_COLUMNS:
            raise DataError(f"unknown patent_mode {patent_mode!r}")
        patent = PATENT_COLUMNS[patent_mode]
    needed = [word, patent, *controls]
    for name in needed:
        if name not in data:
            raise DataError(f"decoupling regression needs column {name!r}")
    year = data.key("year")
    industry = data.key("industry")
    y_all = data.column(word)
    X_all = np.column_stack([data.column(c) for c in [patent, *controls]])
    out = np.full(data.n_rows, np.nan)
    for t in sorted(set(int(y) for y in pre_years)):
        rows = np.flatnonzero(year == t)
        if len(rows) == 0:
            raise DataError(f"no observations in pre-period year {t}")
        ok = np.isfinite(y_all[rows]) & np.isfinite(X_all[rows]).all(axis=1)
        rows = rows[ok]
        n_params = X_all.shape[1] + len(np.unique(industry[rows]))
        if len(rows) <= n_params:
            raise EstimationError(
                f"year {t}: {len(rows)} observations for {n_params} parameters")
        res = ols_cluster(y_all[rows], X_all[rows], {"industry": group_codes(industry[rows])},
                          None, names=[patent, *controls], drop_singletons=False)
        out[rows] = res.residuals
    return out


@dataclass
class WashingAssignment:
    """Per-firm decoupling summary and treatment labels.

    ``table`` is indexed by firm and holds ``resid_mean``, ``n_years``,
    ``treat_mean``, ``treat_strict``, ``treat_single_year``,
    ``intensity_raw`` and ``intensity_std``. ``residuals`` is the
    firm-by-year matrix of pre-period residuals.
    """

    table: pd.DataFrame
    residuals: pd.DataFrame
    pre_years: list[int]
    mode: str = "mean"
    excluded: list = field(default_factory=list)

    @property
    def treat(self) -> pd.Series:
        """Active treatment label per firm (float 0/1, NaN when excluded)."""
        if self.mode == "mean":
            return self.table["treat_mean"].astype(float)
        if self.mode == "single_year":
            return self.table["treat_single_year"].astype(float)
        strict = self.table["treat_strict"]
        return strict.map({"treated": 1.0, "control": 0.0, "excluded": np.nan})

    def firm_column(self, data: PanelDataset, values: pd.Series | str) -> np.ndarray:
        """Broadcast a per-firm series (or a ``table`` column name) onto panel rows."""
        if isinstance(values, str):
            values = self.table[values]
        return values.reindex(data.key("firm_id")).to_numpy()

    def treat_column(self, data: PanelDataset) -> np.ndarray:
        return self.firm_column(data, self.treat).astype(float)

    def to_frame(self) -> pd.DataFrame:
        return self.table.reset_index()

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, na_rep="NA")


def assign_treatment(data: PanelDataset, residuals, pre_years: Iterable[int],
                     mode: str = "mean") -> WashingAssignment:
    """Turn pre-period residuals into firm-level treatment labels.

    mean
        treated when the firm's average residual is strictly positive
        (a zero average is control); averages use available years.
    strict
        treated when positive in every pre-period year, control when
        negative in every year, else excluded; firms missing any
        pre-period year are excluded.
    single_year
        sign of the residual in the final pre-period year.
    """
    if mode not in MODES:
        raise DataError(f"unknown treatment mode {mode!r}")
    pre_years = sorted(set(int(y) for y in pre_years))
    residuals = np.asarray(residuals, dtype=float)
    frame = pd.DataFrame({"firm_id": data.key("firm_id"), "year": data.key("year"),
                          "resid": residuals})
    frame = frame[frame["year"].isin(pre_years) & frame["resid"].notna()]
    wide = frame.pivot(index="firm_id", columns="year", values="resid")
    wide = wide.reindex(columns=pre_years).sort_index()
    all_firms = pd.unique(data.key("firm_id"))
    excluded = sorted(set(all_firms) - set(wide.index), key=str)
    if excluded:
        logger.warning("assign_treatment: %d firms have no pre-period residuals", len(excluded))
    if wide.empty:
        raise DataError("no firm has pre-period residuals")

    mean = wide.mean(axis=1)
    n_years = wide.notna().sum(axis=1)
    complete = n_years == len(pre_years)
    all_pos = (wide > 0).all(axis=1) & complete
    all_neg = (wide < 0).all(axis=1) & complete
    strict = pd.Series("excluded", index=wide.index)
    strict[all_pos] = "treated"
    strict[all_neg] = "control"
    last = wide[pre_years[-1]]
    sd = mean.std(ddof=1)
    table = pd.DataFrame({
        "resid_mean": mean,
        "n_years": n_years,
        "treat_mean": (mean > 0).astype(int),
        "treat_strict": strict,
        "treat_single_year": np.where(last.notna(), (last > 0).astype(float), np.nan),
        "intensity_raw": mean,
        "intensity_std": (mean - mean.mean()) / sd if sd > 0 else np.nan,
    })
    table.index.name = "firm_id"
    return WashingAssignment(table=table, residuals=wide, pre_years=pre_years, mode=mode,
                             excluded=list(excluded))


def _rank_groups(values: pd.Series, n_groups: int) -> pd.Series:
    """0-based equal-count groups by rank; ties broken by firm order."""
    order = sorted(values.index, key=lambda f: (values[f], _sort_key(f)))
    n = len(order)
    return pd.Series({f: (r * n_groups) // n for r, f in enumerate(order)}, dtype=int)


def _sort_key(f):
    return (0, f, "") if isinstance(f, (int, np.integer, float)) else (1, 0, str(f))


def intensity_and_quantiles(assignment: WashingAssignment, scheme: str) -> pd.Series:
    """Per-firm encoding of the mean residual.

    ``raw`` and ``standardized`` give a continuous intensity. The quantile
    schemes label non-positive firms ``Q1`` and split the positive ones by
    rank: ``median_split`` into Q2/Q3, ``terciles`` into Q2/Q3/Q4.
    """
    eps = assignment.table["resid_mean"]
    if scheme == "raw":
        return eps.rename("intensity_raw")
    if scheme == "standardized":
        sd = eps.std(ddof=1)
        if not sd > 0:
            raise EstimationError("standardized intensity undefined: zero dispersion")
        return ((eps - eps.mean()) / sd).rename("intensity_std")
    if scheme not in SCHEMES:
        raise DataError(f"unknown intensity scheme {scheme!r}")
    n_groups = 2 if scheme == "median_split" else 3
    positive = eps[eps > 0]
    if len(positive) < n_groups:
        raise EstimationError(f"{scheme} needs at least {n_groups} positive-residual firms, "
                              f"found {len(positive)}")
    labels = pd.Series("Q1", index=eps.index, name=scheme)
    groups = _rank_groups(positive, n_groups)
    labels[groups.index] = [f"Q{g + 2}" for g in groups]
    return labels


@dataclass
class ZDifference:
    z_word: np.ndarray
    z_patent: np.ndarray
    z_diff: np.ndarray
    flagged_industries: list = field(default_factory=list)


def z_difference(data: PanelDataset, pre_years: Iterable[int] | None = None,
                 word: str = "AIWord", patent: str = "AIPatentStock") -> ZDifference:
    """Industry-standardized disclosure minus industry-standardized patenting.

    Means and standard deviations are taken within industry, pooled over
    ``pre_years`` (all years when None), and applied to every row.
    Industries with zero dispersion in either input get missing z-scores.
    """
    for name in (word, patent):
        if name not in data:
            raise DataError(f"z-difference needs column {name!r}")
    frame = pd.DataFrame({"industry": data.key("industry"), "year": data.key("year"),
                          "w": data.column(word), "p": data.column(patent)})
    pop = frame if pre_years is None else frame[frame["year"].isin(list(pre_years))]
    moments = pop.groupby("industry")[["w", "p"]].agg(["mean", "std"])
    flagged = sorted(moments.index[(moments[("w", "std")] <= 0) | (moments[("p", "std")] <= 0)
                                   | moments[("w", "std")].isna()
                                   | moments[("p", "std")].isna()].tolist(), key=str)
    if flagged:
        logger.warning("z_difference: zero dispersion in industries %s", flagged)
    m = moments.reindex(frame["industry"])
    sd_w = m[("w", "std")].to_numpy()
    sd_p = m[("p", "std")].to_numpy()
    bad = np.isin(frame["industry"].to_numpy(), flagged)
    with np.errstate(divide="ignore", invalid="ignore"):
        zw = (frame["w"].to_numpy() - m[("w", "mean")].to_numpy()) / sd_w
        zp = (frame["p"].to_numpy() - m[("p", "mean")].to_numpy()) / sd_p
    zw[bad] = np.nan
    zp[bad] = np.nan
    return ZDifference(zw, zp, zw - zp, flagged)


@dataclass
class PersistenceStats:
    transition: np.ndarray  # row-normalized, lagged tercile -> current tercile
    counts: np.ndarray
    spearman: float
    spearman_p: float
    n_pairs: int

    def to_dict(self) -> dict:
        return {"transition": self.transition.tolist(), "counts": self.counts.tolist(),
                "spearman": self.spearman, "spearman_p": self.spearman_p,
                "n_pairs": self.n_pairs}


def yearly_terciles(residuals: pd.DataFrame) -> pd.DataFrame:
    """Tercile label (0, 1, 2) of each firm's residual within each year."""
    out = pd.DataFrame(index=residuals.index, columns=residuals.columns, dtype=float)
    for year in residuals.columns:
        col = residuals[year].dropna()
        if len(col):
            out.loc[col.index, year] = _rank_groups(col, 3)
    return out


def persistence_stats(residuals: pd.DataFrame) -> PersistenceStats:
    """Tercile transition matrix and rank correlation of consecutive-year residuals.

    ``residuals`` is a firm-by-year matrix (e.g. ``WashingAssignment.residuals``).
    Pairs are formed from the same firm in years ``t - 1`` and ``t``.
    """
    years = sorted(residuals.columns)
    terc = yearly_terciles(residuals)
    counts = np.zeros((3, 3))
    lag_vals, cur_vals = [], []
    for prev, cur in zip(years[:-1], years[1:]):
        if cur != prev + 1:
            continue
        both = residuals[prev].notna() & residuals[cur].notna()
        if not both.any():
            continue
        a = terc.loc[both, prev].astype(int).to_numpy()
        b = terc.loc[both, cur].astype(int).to_numpy()
        np.add.at(counts, (a, b), 1)
        lag_vals.append(residuals.loc[both, prev].to_numpy())
        cur_vals.append(residuals.loc[both, cur].to_numpy())
    n_pairs = int(counts.sum())
    if n_pairs == 0:
        raise DataError("no consecutive-year residual pairs")
    rows = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        transition = np.where(rows > 0, counts / rows, 0.0)
    x, y = np.concatenate(lag_vals), np.concatenate(cur_vals)
    if n_pairs > 2 and np.ptp(x) > 0 and np.ptp(y) > 0:
        rho, p = stats.spearmanr(x, y)
    else:
        rho, p = np.nan, np.nan
    return PersistenceStats(transition, counts, float(rho), float(p), n_pairs)
