"""Firm-year panel data model, loading, screening and cleaning transforms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

KEYS = ("firm_id", "year", "industry", "province")
ROLES = ("outcome", "regressor", "key", "flag", "moderator")
TRANSFORMS = ("none", "log1p")
NA_VALUES = ["", "NA"]


@dataclass(frozen=True)
class VariableDef:
    name: str
    role: str = "regressor"
    transform: str = "none"
    units: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"variable {self.name!r}: unknown role {self.role!r}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"variable {self.name!r}: unknown transform {self.transform!r}")


class PanelDataset:
    """Rectangular firm-year panel.

    Rows are unique on ``(firm_id, year)`` and always carry the four key
    columns. Missing cells are held as NaN in float columns; the key columns
    can never be missing. Instances are treated as immutable: every
    transform in this package returns a new dataset.
    """

    def __init__(self, frame: pd.DataFrame, meta: Mapping[str, VariableDef] | None = None):
        missing = [k for k in KEYS if k not in frame.columns]
        if missing:
            raise DataError(f"panel is missing key columns: {missing}")
        if frame[list(KEYS)].isna().any().any():
            bad = frame.index[frame[list(KEYS)].isna().any(axis=1)][0]
            raise DataError(f"row {bad}: key columns must not be missing")
        dup = frame.duplicated(subset=["firm_id", "year"])
        if dup.any():
            row = frame.loc[dup].iloc[0]
            raise DataError(
                f"duplicate (firm_id, year) key: ({row['firm_id']}, {row['year']})")
        frame = frame.reset_index(drop=True)
        frame["year"] = frame["year"].astype(np.int64)
        self._frame = frame
        self.meta = dict(meta or {})

    # -- accessors -------------------------------------------------------
    @property
    def frame(self) -> pd.DataFrame:
        """A copy of the underlying table."""
        return self._frame.copy()

    @property
    def n_rows(self) -> int:
        return len(self._frame)

    def __len__(self) -> int:
        return len(self._frame)

    @property
    def columns(self) -> list[str]:
        return list(self._frame.columns)

    def __contains__(self, name: str) -> bool:
        return name in self._frame.columns

    def column(self, name: str) -> np.ndarray:
        if name not in self._frame.columns:
            raise DataError(f"unknown column {name!r}")
        values = self._frame[name]
        if name in ("firm_id", "industry", "province"):
            return values.to_numpy(copy=True)
        return values.to_numpy(dtype=float, na_value=np.nan, copy=True)

    def key(self, name: str) -> np.ndarray:
        return self._frame[name].to_numpy(copy=True)

    @property
    def firms(self) -> np.ndarray:
        return np.asarray(pd.unique(self._frame["firm_id"]))

    # -- derivation ------------------------------------------------------
    def with_columns(self, **columns) -> "PanelDataset":
        frame = self._frame.copy()
        for name, values in columns.items():
            values = np.asarray(values)
            if len(values) != len(frame):
                raise DataError(f"column {name!r} has {len(values)} values for {len(frame)} rows")
            frame[name] = values
        return PanelDataset(frame, self.meta)

    def subset(self, mask) -> "PanelDataset":
        mask = np.asarray(mask, dtype=bool)
        return PanelDataset(self._frame.loc[mask].copy(), self.meta)

    def to_csv(self, path) -> None:
        self._frame.to_csv(path, index=False, na_rep="NA")

    def __repr__(self):
        return (f"PanelDataset({self.n_rows} rows, {self._frame['firm_id'].nunique()} firms, "
                f"columns={self.columns})")


# ---------------------------------------------------------------------------
# loading


def _parse_key(series: pd.Series) -> pd.Series:
    numeric = pd.to_numeric(series, errors="coerce")
    if numeric.notna().all() and (numeric == np.round(numeric)).all():
        return numeric.astype(np.int64)
    return series.astype(str)


def _parse_flag(series: pd.Series, name: str) -> pd.Series:
    lookup = {"1": 1.0, "0": 0.0, "true": 1.0, "false": 0.0, "1.0": 1.0, "0.0": 0.0}
    out = np.full(len(series), np.nan)
    for i, cell in enumerate(series):
        if pd.isna(cell):
            continue
        key = str(cell).strip().lower()
        if key not in lookup:
            raise DataError(f"row {i + 1}, column {name!r}: cannot parse {cell!r} as boolean")
        out[i] = lookup[key]
    return pd.Series(out, index=series.index)


def _parse_numeric(series: pd.Series, name: str) -> pd.Series:
    parsed = pd.to_numeric(series, errors="coerce")
    bad = parsed.isna() & series.notna()
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"row {i + 1}, column {name!r}: cannot parse {series.iloc[i]!r} as a number")
    return parsed.astype(float)


def load_panel(path, schema: Sequence[VariableDef] | None = None) -> PanelDataset:
    """Read a firm-year CSV.

    Empty cells and ``NA`` become missing. When ``schema`` is given the
    header must contain exactly the keys plus the schema variables, and
    each variable is parsed and transformed per its definition.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    raw = pd.read_csv(path, dtype=str, na_values=NA_VALUES, keep_default_na=False,
                      encoding="utf-8")
    header = list(raw.columns)
    missing_keys = [k for k in KEYS if k not in header]
    if missing_keys:
        raise DataError(f"header is missing key columns {missing_keys}")
    if schema is not None:
        names = [v.name for v in schema if v.name not in KEYS]
        absent = [n for n in names if n not in header]
        extra = [h for h in header if h not in KEYS and h not in names]
        if absent or extra:
            raise DataError(f"header mismatch: missing {absent}, unexpected {extra}")
        defs = {v.name: v for v in schema}
    else:
        defs = {h: VariableDef(h) for h in header if h not in KEYS}

    frame = pd.DataFrame(index=raw.index)
    for k in KEYS:
        if raw[k].isna().any():
            i = int(np.flatnonzero(raw[k].isna().to_numpy())[0])
            raise DataError(f"row {i + 1}: key column {k!r} is missing")
        frame[k] = _parse_key(raw[k])
    if frame["year"].dtype.kind != "i":
        raise DataError("column 'year' must hold integers")
    for name, vdef in defs.items():
        if vdef.role == "flag":
            col = _parse_flag(raw[name], name)
        else:
            col = _parse_numeric(raw[name], name)
        if vdef.transform == "log1p":
            if (col < 0).any():
                raise DataError(f"column {name!r}: log1p transform needs non-negative values")
            col = np.log1p(col)
        frame[name] = col
    return PanelDataset(frame, defs)


# ---------------------------------------------------------------------------
# screening and cleaning


@dataclass
class ScreeningConfig:
    drop_sectors: list = field(default_factory=list)
    drop_flags: list[str] = field(default_factory=list)
    required_columns: list[str] = field(default_factory=list)
    winsor_p: float = 0.01
    imputable_columns: list[str] = field(default_factory=list)
    winsor_columns: list[str] | None = None  # None: every continuous non-key column

    def __post_init__(self):
        if not 0 < self.winsor_p < 0.5:
            raise ConfigError(f"winsor_p must lie strictly between 0 and 0.5, got {self.winsor_p}")

    def check(self, data: PanelDataset) -> None:
        problems = []
        for name in self.drop_flags:
            if name not in data:
                problems.append(f"unknown flag column {name!r}")
        for name in list(self.required_columns) + list(self.imputable_columns):
            if name not in data:
                problems.append(f"unknown column {name!r}")
        if problems:
            raise DataError("; ".join(problems))


def screen(data: PanelDataset, cfg: ScreeningConfig, report: dict | None = None) -> PanelDataset:
    """Drop sector rows, flagged rows, and rows missing a required column.

    Survivors keep their order. Pass a dict as ``report`` to receive the
    row counts removed by each step.
    """
    cfg.check(data)
    frame = data.frame
    n0 = len(frame)
    sectors = set(cfg.drop_sectors)
    absent = sectors - set(frame["industry"].unique())
    if absent:
        logger.info("screen: sector codes not present in data: %s", sorted(map(str, absent)))
    keep = ~frame["industry"].isin(sectors).to_numpy()
    n_sector = int((~keep).sum())
    for flag in cfg.drop_flags:
        keep &= ~(frame[flag].fillna(0).to_numpy(dtype=float) != 0)
    n_flag = n0 - n_sector - int(keep.sum())
    if cfg.required_columns:
        keep &= frame[list(cfg.required_columns)].notna().all(axis=1).to_numpy()
    n_required = n0 - n_sector - n_flag - int(keep.sum())
    if report is not None:
        report.update(rows_in=n0, dropped_sector=n_sector, dropped_flag=n_flag,
                      dropped_missing_required=n_required, rows_out=int(keep.sum()))
    return data.subset(keep)


def _require_numeric(data: PanelDataset, name: str) -> np.ndarray:
    if name not in data:
        raise DataError(f"unknown column {name!r}")
    series = data._frame[name]
    if not pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series):
        raise DataError(f"column {name!r} is not numeric")
    return series.to_numpy(dtype=float, na_value=np.nan)


def winsorize(data: PanelDataset, columns: Iterable[str], p: float,
              method: str = "inverted_cdf") -> PanelDataset:
    """Clamp each column to its empirical ``p`` and ``1 - p`` quantiles.

    Quantiles are taken over non-missing entries; missing cells stay
    missing. The default order-statistic quantile makes the map idempotent;
    ``method="linear"`` gives interpolated quantiles instead.
    """
    if not 0 < p < 0.5:
        raise ConfigError(f"winsorization fraction must lie in (0, 0.5), got {p}")
    out = {}
    for name in columns:
        values = _require_numeric(data, name)
        ok = ~np.isnan(values)
        if not ok.any():
            continue
        lo, hi = np.quantile(values[ok], [p, 1 - p], method=method)
        clipped = values.copy()
        clipped[ok] = np.clip(values[ok], lo, hi)
        out[name] = clipped
    return data.with_columns(**out)


def impute_group_mean(data: PanelDataset, columns: Iterable[str]):
    """Fill missing cells with the industry-year mean of non-missing donors.

    Returns ``(dataset, unfilled)`` where ``unfilled`` lists the cells left
    missing because their industry-year group has no donor.
    """
    frame = data._frame
    groups = [frame["industry"], frame["year"]]
    out = {}
    unfilled = []
    for name in columns:
        values = pd.Series(_require_numeric(data, name), index=frame.index)
        if not values.isna().any():
            continue
        means = values.groupby(groups).transform("mean")
        filled = values.fillna(means)
        for i in np.flatnonzero(filled.isna().to_numpy()):
            unfilled.append({"row": int(i), "column": name,
                             "firm_id": _plain(frame["firm_id"].iat[i]),
                             "year": int(frame["year"].iat[i]),
                             "industry": _plain(frame["industry"].iat[i])})
        out[name] = filled.to_numpy()
    if unfilled:
        logger.warning("impute_group_mean: %d cells have no same industry-year donor", len(unfilled))
    return data.with_columns(**out), unfilled


def _plain(x):
    return x.item() if hasattr(x, "item") else x


def lead_lag(data: PanelDataset, column: str, k: int) -> np.ndarray:
    """Value of ``column`` at ``(firm, year + k)`` for each row.

    Missing when that firm-year is not in the panel; a gap year is never
    bridged.
    """
    values = data.column(column)
    if k == 0:
        return values
    frame = data._frame
    lookup = pd.Series(values, index=pd.MultiIndex.from_arrays([frame["firm_id"], frame["year"]]))
    target = pd.MultiIndex.from_arrays([frame["firm_id"], frame["year"] + k])
    return lookup.reindex(target).to_numpy(dtype=float)


def clean(data: PanelDataset, cfg: ScreeningConfig):
    """Full cleaning sequence: screen, impute, winsorize.

    Returns the cleaned dataset and a JSON-ready report of row counts per
    step and of cells left unimputed.
    """
    report: dict = {}
    out = screen(data, cfg, report)
    out, unfilled = impute_group_mean(out, cfg.imputable_columns)
    report["imputed_unfilled_cells"] = len(unfilled)
    cols = cfg.winsor_columns
    if cols is None:
        cols = continuous_columns(out)
    out = winsorize(out, cols, cfg.winsor_p)
    report["winsorized_columns"] = list(cols)
    report["winsor_p"] = cfg.winsor_p
    return out, report


def continuous_columns(data: PanelDataset) -> list[str]:
    """Numeric non-key columns that are not 0/1 indicators."""
    out = []
    for name in data.columns:
        if name in KEYS:
            continue
        vdef = data.meta.get(name)
        if vdef is not None and vdef.role in ("flag", "key"):
            continue
        series = data._frame[name]
        if not pd.api.types.is_numeric_dtype(series):
            continue
        vals = series.dropna().unique()
        if len(vals) <= 2 and set(np.asarray(vals, dtype=float)) <= {0.0, 1.0}:
            continue
        out.append(name)
    return out


def debt_cost_ratio(data: PanelDataset, interest: str, fees: str, other: str,
                    liabilities: str) -> np.ndarray:
    """All-in debt financing cost in percent of end-of-period liabilities.

    ``100 * (interest + fees + other) / liabilities``. Rows with a missing
    component or non-positive liabilities are missing.
    """
    num = data.column(interest) + data.column(fees) + data.column(other)
    den = data.column(liabilities)
    bad = ~(den > 0)
    if (bad & np.isfinite(den)).any():
        logger.warning("debt_cost_ratio: %d rows with non-positive liabilities set missing",
                       int((bad & np.isfinite(den)).sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(bad, np.nan, 100 * num / den)
