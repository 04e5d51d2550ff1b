"""End-to-end study runner driven by a single YAML or JSON config file.

Stages run in a fixed order::

    load -> screen -> wash -> describe -> baseline -> event -> placebo
    -> match -> balance -> heckman -> alternatives -> probit -> moderate
    -> split -> sur

Each stage reads only the config and the cleaned panel, and seeds any
randomness from ``seed`` alone, so switching one stage off never changes
another stage's numbers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import yaml

from . import __version__
from ._parallel import resolve_threads
from .causal import (
    DidSpec, SelectionSpec, did_estimate, entropy_balance_yearly, event_study, heckman_two_stage,
    moderated_did, placebo_permutation, psm_match, subsample_compare, treatment_term,
)
from .causal.did import _fit
from .errors import ConfigError, DataError, EstimationError, PanelCausalError, StageError
from .panel import PanelDataset, ScreeningConfig, VariableDef, clean, lead_lag, load_panel
from .regress import binary_mle, marginal_effects
from .report import (
    ReportBundle, canonical_json, coefficient_table, correlation_matrix, descriptive_table,
    starred_correlations,
)
from .sur import (
    SurSystem, breusch_pagan_independence, signed_equality_test, sur_fit, zero_tests,
)
from .synth import DgpConfig, generate_panel
from .washing import (
    DEFAULT_CONTROLS, MODES, PATENT_COLUMNS, assign_treatment, decoupling_residuals,
    intensity_and_quantiles, persistence_stats, z_difference,
)

logger = logging.getLogger(__name__)

STAGES = ("load", "screen", "wash", "describe", "baseline", "event", "placebo", "match",
          "balance", "heckman", "alternatives", "probit", "moderate", "split", "sur")
TOP_KEYS = ("input", "screening", "washing", "did", "descriptive", "robustness", "sur",
            "moderation", "heterogeneity", "seed", "threads", "output")
ROBUSTNESS = ("event_study", "placebo", "psm", "eb", "heckman", "intensity", "quantile",
              "z_difference", "strict", "single_year", "exclude_years", "policy_controls",
              "probit")
WASHING_KEYS = ("pre_years", "patent_mode", "mode", "controls", "word", "treat_column")
SUR_KEYS = ("outcomes", "regressors", "standardize", "vcov_type", "iterate", "signs", "fe")
TOGGLE_DEFAULTS = {
    "event_study": {"window": [-4, 3], "omitted": -1},
    "placebo": {"n_perm": 1000},
    "psm": {"k": 2, "caliper": 0.01},
    "eb": {"tol": 1e-8},
    "heckman": {"selected": "selected", "regressors": ["no_entry", "AIWashing"],
                "instrument": "IT_ratio"},
    "intensity": {"schemes": ["raw", "standardized"]},
    "quantile": {"schemes": ["median_split", "terciles"]},
    "z_difference": {"word": "AIWord", "patent": "AIPatentStock"},
    "strict": {},
    "single_year": {},
    "exclude_years": {"years": []},
    "policy_controls": {"columns": []},
    "probit": {"outcomes": {"Innov_Sub": 0, "Violation": 1, "Inquiry": 2}},
}
# the key a bare scalar or list toggle value fills in
_SHORTHAND = {"placebo": "n_perm", "intensity": "schemes", "quantile": "schemes",
              "exclude_years": "years", "policy_controls": "columns", "event_study": "window"}


def _normalize_toggle(name, value, problems):
    """``False``/``None`` -> off; ``True`` -> defaults; scalar/list -> shorthand key."""
    if value is None or value is False:
        return None
    base = dict(TOGGLE_DEFAULTS[name])
    if value is True:
        return base
    if isinstance(value, dict):
        unknown = sorted(set(value) - set(base))
        if unknown:
            problems += [f"robustness.{name}: unknown key {k!r}" for k in unknown]
        return {**base, **value}
    if name in _SHORTHAND:
        return {**base, _SHORTHAND[name]: value}
    problems.append(f"robustness.{name}: expected true/false or a mapping, got {value!r}")
    return None


@dataclass
class PipelineConfig:
    """Validated pipeline configuration.

    ``input`` holds exactly one of ``synthetic`` (a :class:`DgpConfig`
    mapping) or ``csv`` (a path plus an optional ``schema`` list).
    ``threads`` never affects results and is excluded from the config hash.
    """

    input: dict
    did: DidSpec = field(default_factory=DidSpec)
    screening: ScreeningConfig | None = None
    washing: dict | None = None
    descriptive: list | None = None
    robustness: dict = field(default_factory=dict)
    sur: dict | None = None
    moderation: list = field(default_factory=list)
    heterogeneity: dict | None = None
    seed: int = 0
    threads: int = 1
    output: str | None = None
    base_dir: Path = field(default_factory=Path.cwd, repr=False)
    raw: dict = field(default_factory=dict, repr=False)

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        """Validate a raw mapping; every problem found is reported at once."""
        if not isinstance(d, dict):
            raise ConfigError(["config must be a mapping"])
        problems = [f"unknown top-level key {k!r}" for k in sorted(set(d) - set(TOP_KEYS))]
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        kw = {"base_dir": base_dir, "raw": d}

        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            problems.append(f"seed must be a non-negative integer, got {seed!r}")
            seed = 0
        kw["seed"] = seed
        threads = d.get("threads", 1)
        if not isinstance(threads, int) or threads < 1:
            problems.append(f"threads must be a positive integer, got {threads!r}")
            threads = 1
        kw["threads"] = threads

        kw["input"] = cls._check_input(d.get("input"), seed, base_dir, problems)
        if d.get("screening") is not None:
            try:
                kw["screening"] = ScreeningConfig(**d["screening"])
            except ConfigError as exc:
                problems += exc.problems
            except TypeError as exc:
                problems.append(f"screening: {exc}")
        kw["washing"] = cls._check_washing(d.get("washing"), problems)
        try:
            kw["did"] = DidSpec.from_dict(d.get("did") or {})
        except ConfigError as exc:
            problems += exc.problems
        except TypeError as exc:
            problems.append(f"did: {exc}")
        if kw["washing"] is None and "did" in kw and kw["did"].treat == "Treat" \
                and "synthetic" in (kw["input"] or {}):
            # without a washing stage the planted label is the natural treatment
            kw["did"] = replace(kw["did"], treat="Treat_true")

        desc = d.get("descriptive")
        if desc is not None and not (isinstance(desc, list) and all(isinstance(c, str) for c in desc)):
            problems.append("descriptive must be a list of column names")
        kw["descriptive"] = desc

        rob = d.get("robustness") or {}
        if not isinstance(rob, dict):
            problems.append("robustness must be a mapping")
            rob = {}
        problems += [f"unknown robustness toggle {k!r}" for k in sorted(set(rob) - set(ROBUSTNESS))]
        kw["robustness"] = {}
        for name in ROBUSTNESS:
            v = _normalize_toggle(name, rob.get(name), problems) if name in rob else None
            if v is not None:
                kw["robustness"][name] = v
        cls._check_robustness(kw["robustness"], kw.get("washing"), problems)

        kw["sur"] = cls._check_sur(d.get("sur"), problems)
        mods = d.get("moderation") or []
        if not (isinstance(mods, list) and all(isinstance(m, str) for m in mods)):
            problems.append("moderation must be a list of column names")
            mods = []
        kw["moderation"] = mods
        het = d.get("heterogeneity")
        if het is not None:
            if isinstance(het, list):
                het = {"splits": het}
            if not isinstance(het, dict) or set(het) - {"splits", "n_perm"}:
                problems.append("heterogeneity must be a list of splits or {splits, n_perm}")
                het = None
            else:
                het = {"splits": list(het.get("splits", [])), "n_perm": int(het.get("n_perm", 1000))}
                if het["n_perm"] < 0:
                    problems.append("heterogeneity.n_perm must be non-negative")
        kw["heterogeneity"] = het

        out = d.get("output")
        if out is not None:
            out = str(out)
            if not _writable(base_dir / out):
                problems.append(f"output directory {out!r} is not writable")
        kw["output"] = out
        if problems:
            raise ConfigError(problems)
        return cls(**kw)

    @staticmethod
    def _check_input(inp, seed, base_dir, problems):
        if not isinstance(inp, dict):
            problems.append("input must be a mapping with exactly one of 'synthetic' or 'csv'")
            return None
        sources = [k for k in ("synthetic", "csv") if k in inp]
        extra = sorted(set(inp) - {"synthetic", "csv", "schema"})
        problems += [f"input: unknown key {k!r}" for k in extra]
        if len(sources) != 1:
            problems.append(f"input needs exactly one source ('synthetic' or 'csv'), got {sources}")
            return None
        if sources == ["synthetic"]:
            syn = dict(inp["synthetic"] or {})
            syn.setdefault("seed", seed)
            try:
                DgpConfig.from_dict(syn)
            except ConfigError as exc:
                problems += [f"input.synthetic: {p}" for p in exc.problems]
            except TypeError as exc:
                problems.append(f"input.synthetic: {exc}")
            return {"synthetic": syn}
        path = base_dir / str(inp["csv"])
        if not path.is_file():
            problems.append(f"input.csv: no such file {str(inp['csv'])!r}")
        schema = inp.get("schema")
        if schema is not None:
            try:
                schema = [VariableDef(**v) if isinstance(v, dict) else VariableDef(str(v))
                          for v in schema]
            except (ConfigError, TypeError) as exc:
                problems.append(f"input.schema: {exc}")
                schema = None
        return {"csv": str(path), "schema": schema}

    @staticmethod
    def _check_washing(w, problems):
        if w is None:
            return None
        if not isinstance(w, dict):
            problems.append("washing must be a mapping")
            return None
        problems += [f"washing: unknown key {k!r}" for k in sorted(set(w) - set(WASHING_KEYS))]
        out = {"patent_mode": "flow", "mode": "mean", "controls": list(DEFAULT_CONTROLS),
               "word": "AIWord", "treat_column": None, **w}
        pre = out.get("pre_years")
        if not (isinstance(pre, list) and len(pre) == 2 and all(isinstance(y, int) for y in pre)
                and pre[0] <= pre[1]):
            problems.append("washing.pre_years must be an inclusive [first, last] year pair")
            out["pre_years"] = [0, -1]
        if out["patent_mode"] not in PATENT_COLUMNS:
            problems.append(f"washing.patent_mode must be one of {sorted(PATENT_COLUMNS)}")
        if out["mode"] not in MODES:
            problems.append(f"washing.mode must be one of {list(MODES)}")
        return out

    @staticmethod
    def _check_robustness(rob, washing, problems):
        if "event_study" in rob:
            win = rob["event_study"]["window"]
            if not (isinstance(win, list) and len(win) == 2 and win[0] < win[1]):
                problems.append("robustness.event_study.window must be [lo, hi] with lo < hi")
        if "placebo" in rob:
            n = rob["placebo"]["n_perm"]
            if not isinstance(n, int) or n < 1:
                problems.append("robustness.placebo.n_perm must be a positive integer")
        if "psm" in rob:
            if rob["psm"]["k"] < 1 or not rob["psm"]["caliper"] > 0:
                problems.append("robustness.psm needs k >= 1 and caliper > 0")
        for name in ("intensity", "quantile", "strict", "single_year"):
            if name in rob and washing is None:
                problems.append(f"robustness.{name} needs a washing section")
        for s in rob.get("intensity", {}).get("schemes", []):
            if s not in ("raw", "standardized"):
                problems.append(f"robustness.intensity: unknown scheme {s!r}")
        for s in rob.get("quantile", {}).get("schemes", []):
            if s not in ("median_split", "terciles"):
                problems.append(f"robustness.quantile: unknown scheme {s!r}")
        if "probit" in rob and not isinstance(rob["probit"]["outcomes"], dict):
            problems.append("robustness.probit.outcomes must map outcome to lead")
        if "probit" in rob and washing is None:
            problems.append("robustness.probit regresses on decoupling residuals and needs washing")

    @staticmethod
    def _check_sur(s, problems):
        if s is None:
            return None
        if not isinstance(s, dict):
            problems.append("sur must be a mapping")
            return None
        problems += [f"sur: unknown key {k!r}" for k in sorted(set(s) - set(SUR_KEYS))]
        out = {"regressors": [], "standardize": True, "vcov_type": "robust", "iterate": False,
               "signs": None, "fe": ["firm_id", "year"], **s}
        if not isinstance(out.get("outcomes"), list) or len(out["outcomes"]) < 2:
            problems.append("sur.outcomes must list at least two outcome columns")
            out["outcomes"] = []
        if out["vcov_type"] not in ("robust", "cluster", "gls"):
            problems.append("sur.vcov_type must be robust, cluster or gls")
        if out["signs"] is not None and len(out["signs"]) != len(out["outcomes"]):
            problems.append("sur.signs needs one sign per outcome")
        return out

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"cannot read config {str(path)!r}: {exc}"]) from exc
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot parse config {str(path)!r}: {exc}"]) from exc
        return cls.from_dict(d or {}, base_dir=path.parent)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        """Normalized form used for the config hash (threads and output left out)."""
        inp = dict(self.input)
        if "csv" in inp:
            inp["csv"] = Path(inp["csv"]).name
            if inp.get("schema") is not None:
                inp["schema"] = [{f.name: getattr(v, f.name) for f in fields(v)}
                                 for v in inp["schema"]]
        return {
            "input": inp,
            "screening": None if self.screening is None else
            {f.name: getattr(self.screening, f.name) for f in fields(self.screening)},
            "washing": self.washing, "did": self.did.to_dict(), "descriptive": self.descriptive,
            "robustness": self.robustness, "sur": self.sur, "moderation": self.moderation,
            "heterogeneity": self.heterogeneity, "seed": self.seed,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    @property
    def workers(self) -> int:
        return resolve_threads(self.threads)

    @property
    def pre_years(self) -> list[int]:
        lo, hi = self.washing["pre_years"]
        return list(range(lo, hi + 1))


def _writable(path: Path) -> bool:
    p = path
    while not p.exists():
        if p.parent == p:
            return False
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK | os.X_OK)


# ---------------------------------------------------------------------------
# stage state


@dataclass
class _State:
    cfg: PipelineConfig
    bundle: ReportBundle
    data: PanelDataset | None = None
    assignment: object = None
    truth: object = None


def _did_result(res, name):
    out = res.to_dict()
    out["headline"] = {"estimate": res.coef(name), "se": res.se(name), "p": res.pvalue(name)}
    return out


def _firm_means(data, columns, years):
    """Per-firm mean of ``columns`` over ``years`` (rows indexed by firm)."""
    rows = np.isin(data.key("year"), years)
    frame = data.frame.loc[rows, ["firm_id", *columns]]
    return frame.groupby("firm_id", sort=True)[list(columns)].mean()


def _stage_load(st: _State):
    inp = st.cfg.input
    if "synthetic" in inp:
        data, truth = generate_panel(DgpConfig.from_dict(dict(inp["synthetic"])))
        st.truth = truth
        st.bundle.results["input"] = {"source": "synthetic", "preset": inp["synthetic"].get(
            "preset", "did_parallel"), "n_rows": data.n_rows}
    else:
        data = load_panel(inp["csv"], inp.get("schema"))
        st.bundle.results["input"] = {"source": "csv", "file": Path(inp["csv"]).name,
                                      "n_rows": data.n_rows}
    st.data = data


def _stage_screen(st: _State):
    if st.cfg.screening is None:
        return
    st.data, report = clean(st.data, st.cfg.screening)
    st.bundle.results["screening"] = report


def _stage_wash(st: _State):
    cfg, data = st.cfg, st.data
    spec = cfg.did
    w = cfg.washing
    if w is None:
        if spec.treat not in data:
            raise DataError(f"treatment column {spec.treat!r} not in data and no washing section")
        return
    resid = decoupling_residuals(data, cfg.pre_years, w["patent_mode"], w["controls"], w["word"])
    assignment = assign_treatment(data, resid, cfg.pre_years, w["mode"])
    st.assignment = assignment
    treat = assignment.treat_column(data)
    if w["treat_column"] is not None:
        if w["treat_column"] not in data:
            raise DataError(f"washing.treat_column {w['treat_column']!r} not in data")
        treat = data.column(w["treat_column"])
    data = data.with_columns(**{spec.treat: treat, "decoupling_resid": resid})
    keep = np.isfinite(treat)
    st.data = data if keep.all() else data.subset(keep)
    t = assignment.table
    summary = {"mode": w["mode"], "patent_mode": w["patent_mode"], "pre_years": cfg.pre_years,
               "n_firms": int(len(t)), "n_treated": int((assignment.treat == 1).sum()),
               "n_control": int((assignment.treat == 0).sum()),
               "n_excluded": int(assignment.treat.isna().sum() + len(assignment.excluded)),
               "strict_counts": {k: int(v) for k, v in t["treat_strict"].value_counts()
                                 .sort_index().items()},
               "treat_column": w["treat_column"], "rows_dropped": int((~keep).sum())}
    if st.truth is not None:
        planted = st.truth.planted_residuals
        ok = np.isfinite(resid)
        summary["planted_residual_corr"] = float(np.corrcoef(resid[ok], planted[ok])[0, 1])
    if len(cfg.pre_years) > 1:
        ps = persistence_stats(assignment.residuals)
        summary["persistence"] = ps.to_dict()
        st.bundle.tables["persistence_transition"] = pd.DataFrame(
            ps.transition, index=pd.Index(["T1", "T2", "T3"], name="from"),
            columns=["T1", "T2", "T3"])
    st.bundle.results["washing"] = summary
    st.bundle.tables["washing_assignment"] = t.sort_index()


def _stage_describe(st: _State):
    spec = st.cfg.did
    cols = st.cfg.descriptive or [spec.outcome, spec.treat, *spec.controls]
    missing = [c for c in cols if c not in st.data]
    if missing:
        raise DataError(f"descriptive columns not in data: {missing}")
    st.bundle.tables["descriptive"] = descriptive_table(st.data, cols)
    R, P = correlation_matrix(st.data, cols)
    st.bundle.tables["correlation"] = starred_correlations(R, P)


def _stage_baseline(st: _State):
    spec = st.cfg.did
    res = did_estimate(st.data, spec)
    st.bundle.results["baseline"] = _did_result(res, spec.interaction_name)
    st.bundle.tables["baseline"] = coefficient_table(res.to_dict())


def _stage_event(st: _State):
    opt = st.cfg.robustness.get("event_study")
    if opt is None:
        return
    es = event_study(st.data, st.cfg.did, tuple(opt["window"]), opt["omitted"])
    st.bundle.results["event_study"] = es.to_dict()
    st.bundle.tables["event_study"] = es.to_frame()


def _stage_placebo(st: _State):
    opt = st.cfg.robustness.get("placebo")
    if opt is None:
        return
    pr = placebo_permutation(st.data, st.cfg.did, opt["n_perm"], st.cfg.seed, st.cfg.workers)
    st.bundle.results["placebo"] = pr.to_dict()
    st.bundle.tables["placebo_draws"] = pr.to_frame()


def _pre_years(st: _State) -> list[int]:
    """Washing pre-period, or every year before the policy when there is none."""
    if st.cfg.washing is not None:
        return st.cfg.pre_years
    year = st.data.key("year")
    return sorted(set(year[year < st.cfg.did.policy_year].tolist()))


def _treated_rows(data, spec):
    ok = np.isfinite(data.column(spec.treat))
    return data if ok.all() else data.subset(ok)


def _stage_match(st: _State):
    opt = st.cfg.robustness.get("psm")
    if opt is None:
        return
    spec = st.cfg.did
    data = _treated_rows(st.data, spec)
    units = _firm_means(data, [spec.treat, *spec.controls], _pre_years(st)).reset_index()
    wv = psm_match(units, spec.treat, spec.controls, k=opt["k"], caliper=opt["caliper"],
                   seed=st.cfg.seed)
    firm_w = pd.Series(wv.weights, index=units["firm_id"])
    w = firm_w.reindex(data.key("firm_id")).fillna(0.0).to_numpy()
    keep = w > 0
    res = did_estimate(data.subset(keep), spec, weights=w[keep])
    st.bundle.results["psm"] = {"weights": wv.to_dict(),
                                "did": _did_result(res, spec.interaction_name)}
    st.bundle.tables["psm_balance"] = wv.diagnostics


def _stage_balance(st: _State):
    opt = st.cfg.robustness.get("eb")
    if opt is None:
        return
    spec = st.cfg.did
    data = _treated_rows(st.data, spec)
    wv = entropy_balance_yearly(data, spec.treat, spec.controls, _pre_years(st), opt["tol"])
    res = did_estimate(data, spec, weights=wv.weights)
    info = wv.to_dict()
    info["unweighted_firms"] = len(wv.info["unweighted_firms"])
    st.bundle.results["eb"] = {"weights": info, "did": _did_result(res, spec.interaction_name)}
    st.bundle.tables["eb_balance"] = wv.diagnostics


def _stage_heckman(st: _State):
    opt = st.cfg.robustness.get("heckman")
    if opt is None:
        return
    sel = SelectionSpec(opt["selected"], tuple(opt["regressors"]), opt["instrument"])
    hr = heckman_two_stage(st.data, sel, st.cfg.did)
    out = hr.to_dict()
    out["headline"] = {"estimate": hr.second_stage.coef(st.cfg.did.interaction_name),
                       "se": hr.second_stage.se(st.cfg.did.interaction_name),
                       "p": hr.second_stage.pvalue(st.cfg.did.interaction_name)}
    st.bundle.results["heckman"] = out


def _quantile_did(data, spec, labels):
    """One regression with a ``Qk x Post`` term per non-reference quantile group."""
    post = (data.key("year") >= spec.policy_year).astype(float)
    levels = sorted(x for x in pd.unique(labels) if isinstance(x, str) and x != "Q1")
    regs = [(labels == q).astype(float) * post for q in levels]
    names = [f"{q}_x_Post" for q in levels]
    return _fit(data, spec, regs, names)


def _stage_alternatives(st: _State):
    rob, spec, data = st.cfg.robustness, st.cfg.did, st.data
    out = {}
    a = st.assignment
    for scheme in rob.get("intensity", {}).get("schemes", []):
        col = f"intensity_{scheme}"
        d = data.with_columns(**{col: a.firm_column(data, intensity_and_quantiles(a, scheme))})
        out[col] = _did_result(did_estimate(d, replace(spec, treat=col)), spec.interaction_name)
    for scheme in rob.get("quantile", {}).get("schemes", []):
        labels = a.firm_column(data, intensity_and_quantiles(a, scheme))
        out[f"quantile_{scheme}"] = _quantile_did(data, spec, labels).to_dict()
    if "z_difference" in rob:
        opt = rob["z_difference"]
        pre = st.cfg.pre_years if st.cfg.washing else None
        z = z_difference(data, pre, opt["word"], opt["patent"])
        years = pre if pre is not None else sorted(set(data.key("year").tolist()))
        zf = _firm_means(data.with_columns(_z=z.z_diff), ["_z"], years)["_z"]
        col = (zf > 0).astype(float).where(zf.notna())
        d = data.with_columns(Treat_z=col.reindex(data.key("firm_id")).to_numpy())
        res = did_estimate(d, replace(spec, treat="Treat_z"))
        out["z_difference"] = {**_did_result(res, spec.interaction_name),
                               "flagged_industries": [str(x) for x in z.flagged_industries]}
    for mode in ("strict", "single_year"):
        if mode in rob:
            alt = assign_treatment(data, data.column("decoupling_resid"), st.cfg.pre_years, mode)
            d = data.with_columns(**{spec.treat: alt.treat_column(data)})
            d = _treated_rows(d, spec)
            out[mode] = _did_result(did_estimate(d, spec), spec.interaction_name)
    if "exclude_years" in rob:
        years = rob["exclude_years"]["years"]
        d = data.subset(~np.isin(data.key("year"), years))
        out["exclude_years"] = {**_did_result(did_estimate(d, spec), spec.interaction_name),
                                "excluded": list(years)}
    if "policy_controls" in rob:
        cols = rob["policy_controls"]["columns"]
        res = did_estimate(data, replace(spec, controls=spec.controls + tuple(cols)))
        out["policy_controls"] = _did_result(res, spec.interaction_name)
    if out:
        st.bundle.results["alternatives"] = out


def _stage_probit(st: _State):
    opt = st.cfg.robustness.get("probit")
    if opt is None:
        return
    data, spec = st.data, st.cfg.did
    pre = np.isin(data.key("year"), st.cfg.pre_years)
    X = np.column_stack([data.column("decoupling_resid"),
                         *(data.column(c) for c in spec.controls)])
    names = ["decoupling_resid", *spec.controls]
    out = {}
    for outcome, lead in sorted(opt["outcomes"].items()):
        if outcome not in data:
            raise DataError(f"probit outcome {outcome!r} not in data")
        y = lead_lag(data, outcome, int(lead))
        m = binary_mle(y[pre], X[pre], "probit", data.key("firm_id")[pre], names=names)
        me = marginal_effects(m, X[pre][np.isfinite(y[pre])])
        out[f"{outcome}_lead{int(lead)}"] = {**m.to_dict(), "ame": me.as_dict()}
    st.bundle.results["probit"] = out


def _stage_moderate(st: _State):
    if not st.cfg.moderation:
        return
    spec = st.cfg.did
    out = {m: moderated_did(st.data, spec, m).to_dict() for m in st.cfg.moderation}
    st.bundle.results["moderation"] = out


def _stage_split(st: _State):
    het = st.cfg.heterogeneity
    if not het or not het["splits"]:
        return
    spec = st.cfg.did
    data = _treated_rows(st.data, spec)
    rows, out = [], {}
    for s in het["splits"]:
        r = subsample_compare(data, spec, s, het["n_perm"], st.cfg.seed, st.cfg.workers)
        out[s] = r.to_dict()
        rows.append({"split": s, "low": r.low.coef(spec.interaction_name),
                     "high": r.high.coef(spec.interaction_name), "difference": r.difference,
                     "empirical_p": np.nan if r.p_value is None else r.p_value})
    st.bundle.results["heterogeneity"] = out
    st.bundle.tables["heterogeneity"] = pd.DataFrame(rows).set_index("split")


def _stage_sur(st: _State):
    s = st.cfg.sur
    if s is None:
        return
    spec = st.cfg.did
    name = spec.interaction_name
    data = st.data.with_columns(**{name: treatment_term(st.data, spec)})
    regs = [name, *s["regressors"]]
    system = SurSystem([(y, regs) for y in s["outcomes"]], s["standardize"],
                       tuple(s["fe"]) if s["fe"] else None, s["vcov_type"],
                       iterate=s["iterate"])
    system = sur_fit(data, system)
    bp = breusch_pagan_independence(n=system.n_effective, sigma=system.sigma_hat)
    zt = zero_tests(system, name)
    out = {"system": system.to_dict(), "breusch_pagan": {**bp.to_dict(),
                                                          "n_effective": system.n_effective},
           "wald_zero": {"individual": {k: v.to_dict() for k, v in zt["individual"].items()},
                         "joint": zt["joint"].to_dict()}}
    if s["signs"] is not None:
        out["signed_equality"] = {**signed_equality_test(system, name, s["signs"]).to_dict(),
                                  "signs": list(s["signs"])}
    st.bundle.results["sur"] = out
    coefs = pd.DataFrame([{"outcome": y, "term": x, "estimate": system.coef(y, x),
                           "se": system.se(y, x)} for y, xs in system.equations for x in xs])
    st.bundle.tables["sur_coefficients"] = coefs.set_index("outcome")
    st.bundle.tables["sur_residual_corr"] = pd.DataFrame(
        system.residual_corr, index=pd.Index(system.outcomes, name="outcome"),
        columns=system.outcomes)


_RUNNERS = {
    "load": _stage_load, "screen": _stage_screen, "wash": _stage_wash,
    "describe": _stage_describe, "baseline": _stage_baseline, "event": _stage_event,
    "placebo": _stage_placebo, "match": _stage_match, "balance": _stage_balance,
    "heckman": _stage_heckman, "alternatives": _stage_alternatives, "probit": _stage_probit,
    "moderate": _stage_moderate, "split": _stage_split, "sur": _stage_sur,
}


def manifest(cfg: PipelineConfig, stages) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "stages": list(stages),
            "versions": {"panelcausal": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "pandas": pd.__version__,
                         "python": platform.python_version()}}


def run_pipeline(cfg: PipelineConfig, stages=None) -> ReportBundle:
    """Run the configured study and return its report bundle.

    ``stages`` restricts the run to a subset of :data:`STAGES`; the data
    stages ``load``, ``screen`` and ``wash`` always run. A failure inside a
    stage is re-raised as :class:`StageError` naming the stage.
    """
    return _run(cfg, stages).bundle


def prepare_panel(cfg: PipelineConfig, wash: bool = True):
    """Load, screen and (optionally) wash; returns ``(panel, bundle)``."""
    st = _run(cfg, ("load", "screen", "wash") if wash else ("load", "screen"), force=True)
    return st.data, st.bundle


def _run(cfg, stages, force=False) -> _State:
    if stages is None:
        stages = STAGES
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError([f"unknown stage {s!r}" for s in unknown])
    wanted = set(stages) if force else set(stages) | {"load", "screen", "wash"}
    order = [s for s in STAGES if s in wanted]
    bundle = ReportBundle(manifest=manifest(cfg, order))
    st = _State(cfg, bundle)
    for name in order:
        logger.info("stage %s", name)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                _RUNNERS[name](st)
        except StageError:
            raise
        except (PanelCausalError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, np.linalg.LinAlgError):
                exc = EstimationError(str(exc))
            raise StageError(name, exc) from exc
    return st
