"""Report tables and canonical JSON / CSV / markdown emitters."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, DataError
from .panel import PanelDataset
from .regress.ols import stars

SIG_DIGITS = 6
FORMATS = ("json", "csv", "markdown")


def descriptive_table(data: PanelDataset, columns: Sequence[str]) -> pd.DataFrame:
    """N, mean, SD, min, median, max, kurtosis and skewness per column.

    Kurtosis is the Pearson (non-excess) moment ratio.
    """
    rows = {}
    for c in columns:
        v = data.column(c) if isinstance(data, PanelDataset) else np.asarray(data[c], float)
        v = v[np.isfinite(v)]
        if len(v) == 0:
            raise DataError(f"column {c!r} has no observed values")
        flat = len(v) < 2 or np.ptp(v) == 0
        rows[c] = {"N": len(v), "Mean": v.mean(), "SD": v.std(ddof=1) if len(v) > 1 else np.nan,
                   "Min": v.min(), "Median": np.median(v), "Max": v.max(),
                   "Kurtosis": np.nan if flat else stats.kurtosis(v, fisher=False),
                   "Skewness": np.nan if flat else stats.skew(v)}
    out = pd.DataFrame.from_dict(rows, orient="index")
    out.index.name = "variable"
    return out


def correlation_matrix(data: PanelDataset, columns: Sequence[str]):
    """Pairwise Pearson correlations and two-sided p-values (pairwise-complete rows)."""
    k = len(columns)
    R = np.eye(k)
    P = np.zeros((k, k))
    cols = [data.column(c) for c in columns]
    for i in range(k):
        for j in range(i):
            ok = np.isfinite(cols[i]) & np.isfinite(cols[j])
            if ok.sum() < 3 or np.ptp(cols[i][ok]) == 0 or np.ptp(cols[j][ok]) == 0:
                r, p = np.nan, np.nan
            else:
                r, p = stats.pearsonr(cols[i][ok], cols[j][ok])
            R[i, j] = R[j, i] = r
            P[i, j] = P[j, i] = p
    return (pd.DataFrame(R, index=list(columns), columns=list(columns)),
            pd.DataFrame(P, index=list(columns), columns=list(columns)))


def starred_correlations(R: pd.DataFrame, P: pd.DataFrame) -> pd.DataFrame:
    """Lower-triangular correlation table as strings with significance stars."""
    out = pd.DataFrame("", index=R.index, columns=R.columns)
    for i, a in enumerate(R.index):
        for j, b in enumerate(R.columns[: i + 1]):
            out.loc[a, b] = "1.000" if i == j else f"{R.iloc[i, j]:.3f}{stars(P.iloc[i, j])}"
    return out


def coefficient_table(result: dict) -> pd.DataFrame:
    """Flatten a ``{"coefficients": {name: {...}}}`` result into a table."""
    coefs = result["coefficients"]
    out = pd.DataFrame.from_dict(coefs, orient="index")
    out.index.name = "term"
    return out


# ---------------------------------------------------------------------------
# canonical serialization


def _round(x: float):
    if not math.isfinite(x):
        return None
    if x == 0:
        return 0.0
    return float(f"{x:.{SIG_DIGITS}g}")


def canonical(obj):
    """Convert to plain JSON types with floats rounded to 6 significant digits."""
    if isinstance(obj, dict):
        return {str(k): canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [canonical(v) for v in obj.tolist()]
    if isinstance(obj, pd.DataFrame):
        return canonical(table_payload(obj))
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _round(float(obj))
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return canonical(obj.to_dict())
    return str(obj)


def canonical_json(obj) -> str:
    return json.dumps(canonical(obj), sort_keys=True, indent=1, ensure_ascii=True,
                      allow_nan=False) + "\n"


def table_payload(df: pd.DataFrame) -> dict:
    return {"index_name": df.index.name, "index": [canonical(i) for i in df.index],
            "columns": [str(c) for c in df.columns],
            "data": [[canonical(v) for v in row] for row in df.itertuples(index=False)]}


def table_from_payload(p: dict) -> pd.DataFrame:
    df = pd.DataFrame(p["data"], index=p["index"], columns=p["columns"])
    df.index.name = p.get("index_name")
    return df


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ReportBundle:
    """Everything a pipeline run reports.

    ``results`` maps stage name to a JSON-ready dict; ``tables`` maps
    table name to a DataFrame emitted as its own CSV file.
    """

    results: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"manifest": self.manifest, "results": self.results,
                "tables": {k: table_payload(v) for k, v in sorted(self.tables.items())}}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ReportBundle":
        d = json.loads(text)
        return cls(results=d.get("results", {}),
                   tables={k: table_from_payload(v) for k, v in d.get("tables", {}).items()},
                   manifest=d.get("manifest", {}))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            return ""
        return f"{v:.4f}" if abs(v) < 1e6 else f"{v:.4g}"
    return str(v)


def markdown_table(df: pd.DataFrame) -> str:
    head = [df.index.name or ""] + [str(c) for c in df.columns]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for idx, row in zip(df.index, df.itertuples(index=False)):
        lines.append("| " + " | ".join([str(idx)] + [_fmt(v) for v in row]) + " |")
    return "\n".join(lines)


def regression_markdown(name: str, result: dict) -> str:
    """Estimate with stars over the standard error in parentheses."""
    lines = [f"| {name} | |", "|---|---|"]
    for term, c in result["coefficients"].items():
        est, se, p = c.get("estimate"), c.get("se"), c.get("p")
        star = stars(p) if p is not None else ""
        lines.append(f"| {term} | {_fmt(est)}{star} |")
        lines.append(f"| | ({_fmt(se)}) |")
    fit = result.get("fit", {})
    for k in ("n_obs", "n_clusters", "r2", "adj_r2", "pseudo_r2"):
        if fit.get(k) is not None:
            lines.append(f"| {k} | {_fmt(fit[k])} |")
    return "\n".join(lines)


def _regressions(results: dict, prefix=""):
    """Yield (label, result) for every nested dict shaped like a regression."""
    for k in sorted(results):
        v = results[k]
        if not isinstance(v, dict):
            continue
        label = f"{prefix}{k}"
        if isinstance(v.get("coefficients"), dict) and all(
                isinstance(c, dict) and "estimate" in c for c in v["coefficients"].values()):
            yield label, v
        else:
            yield from _regressions(v, label + " / ")


def render_markdown(bundle: ReportBundle) -> str:
    out = ["# Pipeline report", ""]
    m = bundle.manifest
    if m:
        out += [f"- config hash: `{m.get('config_hash', '')}`", f"- seed: {m.get('seed')}", ""]
    out += ["Significance: * p<0.1, ** p<0.05, *** p<0.01.", ""]
    for name in sorted(bundle.tables):
        out += [f"## {name}", "", markdown_table(bundle.tables[name]), ""]
    for label, res in _regressions(bundle.results):
        out += [f"## {label}", "", regression_markdown("term", canonical(res)), ""]
    return "\n".join(out)


def emit_report(bundle: ReportBundle, outdir, formats: Sequence[str] = FORMATS) -> list[Path]:
    """Write the bundle; one CSV per table. Returns the written paths.

    Every file is rendered from the canonical JSON form, so re-emitting a
    loaded ``report.json`` reproduces all files byte for byte.
    """
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise DataError(f"unknown report formats {bad}")
    text = bundle.to_json()
    bundle = ReportBundle.from_json(text)
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        if "json" in formats:
            p = outdir / "report.json"
            p.write_text(text)
            written.append(p)
        if "csv" in formats:
            for name, df in sorted(bundle.tables.items()):
                p = outdir / f"{name}.csv"
                df.to_csv(p, float_format="%.10g", na_rep="NA", lineterminator="\n")
                written.append(p)
        if "markdown" in formats:
            p = outdir / "report.md"
            p.write_text(render_markdown(bundle))
            written.append(p)
    except OSError as exc:
        raise ConfigError([f"cannot write report to {outdir}: {exc}"]) from exc
    return written
