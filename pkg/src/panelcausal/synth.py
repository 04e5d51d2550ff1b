"""Synthetic firm-year panels with planted ground truth.

Every estimator in the package is checked against panels drawn here. The
generator is a pure function of its config: equal configs (seed included)
give bit-identical panels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .errors import ConfigError
from .panel import PanelDataset, VariableDef

PRESETS = ("did_parallel", "did_violated_pretrend", "selection", "sur_system", "persistence")
CONTROLS = ("Size", "Lev", "ROA", "Liquid", "Top5", "TobinQ", "ListAge")
SUR_OUTCOMES = ("DebtFC", "DebtFlow", "AIWordIntensity", "AIPatentOutput")

# location, firm-level sd, within-firm sd
_CONTROL_SHAPE = {
    "Size": (22.35, 1.2, 0.4), "Lev": (0.42, 0.18, 0.08), "ROA": (0.033, 0.06, 0.05),
    "Liquid": (2.5, 2.0, 1.0), "Top5": (0.52, 0.14, 0.05), "TobinQ": (2.1, 1.5, 1.0),
    "ListAge": (2.2, 0.8, 0.1),
}


def _default_control_coefs():
    return {"Size": -0.030, "Lev": 1.182, "ROA": -1.112, "Liquid": 0.008, "Top5": -0.839,
            "TobinQ": -0.007, "ListAge": 0.196}


def _default_fe_scales():
    return {"firm": 1.0, "year": 0.3, "industry_year": 0.2, "province_year": 0.2}


@dataclass
class DgpConfig:
    """Parameters of the data-generating process.

    ``sur_error_corr`` defaults to the identity. ``event_path`` maps event
    time to an effect and, when set, replaces the constant ``beta_treat``
    step. ``moderator_effects`` maps a moderator column to a
    ``(main, interaction)`` pair of planted coefficients.
    """

    preset: str = "did_parallel"
    n_firms: int = 500
    years: tuple = (2015, 2024)
    policy_year: int = 2021
    beta_treat: float = 0.125
    treated_share: float = 0.169
    selection_rho: float = 0.0
    sur_error_corr: list | None = None
    sur_coefs: tuple = (0.018, -0.049, -0.044, 0.051)
    residual_ar: float = 0.0
    fe_scales: dict = field(default_factory=_default_fe_scales)
    control_coefs: dict = field(default_factory=_default_control_coefs)
    noise_scale: float = 1.0
    noise_ar: float = 0.0
    n_industries: int = 10
    n_provinces: int = 8
    pretrend: float = 0.05
    event_path: dict | None = None
    moderator_effects: dict = field(default_factory=dict)
    beta_treat_split: float | None = None
    covariate_imbalance: float = 0.3
    washing_shift: float = 1.5
    washing_noise: float = 0.3
    patent_slope: float = 0.5
    selection_coefs: dict = field(default_factory=lambda: {
        "const": 0.3, "IT_ratio": 1.0, "no_entry": -0.5, "AIWashing": -1.0})
    seed: int = 0

    def __post_init__(self):
        self.years = tuple(int(y) for y in self.years)
        if self.event_path is not None:
            self.event_path = {int(k): float(v) for k, v in self.event_path.items()}
        self.moderator_effects = {k: tuple(v) for k, v in self.moderator_effects.items()}
        self.sur_coefs = tuple(self.sur_coefs)

    @property
    def year_range(self) -> list[int]:
        return list(range(self.years[0], self.years[1] + 1))

    @property
    def sigma(self) -> np.ndarray:
        if self.sur_error_corr is None:
            return np.eye(len(SUR_OUTCOMES))
        return np.asarray(self.sur_error_corr, dtype=float)

    def validate(self) -> None:
        problems = []
        if self.preset not in PRESETS:
            problems.append(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.years[0] > self.years[1]:
            problems.append("years must be an increasing range")
        if not self.years[0] <= self.policy_year <= self.years[1]:
            problems.append("policy_year must lie inside the year range")
        if not 0 <= self.residual_ar < 1:
            problems.append("residual_ar must lie in [0, 1)")
        if not 0 <= self.noise_ar < 1:
            problems.append("noise_ar must lie in [0, 1)")
        if not -1 <= self.selection_rho <= 1:
            problems.append("selection_rho must lie in [-1, 1]")
        if not 0 < self.treated_share < 1:
            problems.append("treated_share must lie in (0, 1)")
        if self.n_firms < 4:
            problems.append("n_firms must be at least 4")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        S = self.sigma
        if S.shape != (len(SUR_OUTCOMES),) * 2:
            problems.append(f"sur_error_corr must be {len(SUR_OUTCOMES)}x{len(SUR_OUTCOMES)}")
        elif not np.allclose(S, S.T) or not np.allclose(np.diag(S), 1):
            problems.append("sur_error_corr must be symmetric with unit diagonal")
        elif np.linalg.eigvalsh(S).min() < -1e-10:
            problems.append("sur_error_corr must be positive semi-definite")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["years"] = list(self.years)
        d["sur_coefs"] = list(self.sur_coefs)
        d["moderator_effects"] = {k: list(v) for k, v in self.moderator_effects.items()}
        if self.event_path is not None:
            d["event_path"] = {str(k): v for k, v in sorted(self.event_path.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown synthetic config key {k!r}" for k in unknown])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class GroundTruth:
    firm_ids: np.ndarray
    treated: np.ndarray  # bool per firm, aligned with firm_ids
    beta_treat: float
    event_path: dict
    policy_year: int
    selection: dict
    sur_sigma: np.ndarray
    sur_coefs: tuple
    residual_ar: float
    planted_residuals: np.ndarray  # per panel row
    moderator_effects: dict = field(default_factory=dict)
    beta_by_split: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "firms": [int(f) for f in self.firm_ids],
            "treated": [bool(t) for t in self.treated],
            "beta_treat": self.beta_treat,
            "event_path": {str(k): v for k, v in sorted(self.event_path.items())},
            "policy_year": self.policy_year,
            "selection": self.selection,
            "sur_sigma": self.sur_sigma.tolist(),
            "sur_coefs": list(self.sur_coefs),
            "residual_ar": self.residual_ar,
            "moderator_effects": {k: list(v) for k, v in self.moderator_effects.items()},
            "beta_by_split": self.beta_by_split,
            "planted_residuals": [float(x) for x in self.planted_residuals],
        }


def _ar1(rng, n_firms, n_years, rho, scale=1.0):
    """Stationary within-firm AR(1) Gaussian series, shape (n_firms, n_years)."""
    shocks = rng.standard_normal((n_firms, n_years))
    out = np.empty_like(shocks)
    out[:, 0] = shocks[:, 0]
    innov = np.sqrt(1 - rho ** 2)
    for t in range(1, n_years):
        out[:, t] = rho * out[:, t - 1] + innov * shocks[:, t]
    return scale * out


def generate_panel(cfg: DgpConfig) -> tuple[PanelDataset, GroundTruth]:
    """Draw one balanced panel and its ground truth."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    years = np.array(cfg.year_range)
    F, T = cfg.n_firms, len(years)
    n = F * T
    firm_ids = np.arange(1, F + 1)
    firm = np.repeat(firm_ids, T)
    year = np.tile(years, F)
    fidx = np.repeat(np.arange(F), T)
    tidx = np.tile(np.arange(T), F)
    ind_f = rng.integers(0, cfg.n_industries, F)
    prov_f = rng.integers(0, cfg.n_provinces, F)
    ind, prov = ind_f[fidx], prov_f[fidx]

    n_treated = int(round(cfg.treated_share * F))
    treated = np.zeros(F, dtype=bool)
    treated[rng.permutation(F)[:n_treated]] = True
    treat = treated[fidx].astype(float)
    post = (year >= cfg.policy_year).astype(float)
    event_time = year - cfg.policy_year

    # controls: firm component shifted by treatment, plus within-firm noise
    controls = {}
    for name in CONTROLS:
        loc, sd_firm, sd_within = _CONTROL_SHAPE[name]
        firm_part = rng.standard_normal(F) + cfg.covariate_imbalance * treated
        controls[name] = loc + sd_firm * firm_part[fidx] + sd_within * rng.standard_normal(n)

    # planted decoupling residuals and the disclosure/patent block
    if cfg.preset == "persistence":
        mu = np.zeros(F)
        resid = _ar1(rng, F, T, cfg.residual_ar).ravel()
    else:
        control_shift = -cfg.washing_shift * n_treated / (F - n_treated)
        mu = np.where(treated, cfg.washing_shift, control_shift)
        resid = mu[fidx] + _ar1(rng, F, T, cfg.residual_ar, cfg.washing_noise).ravel()
    patent_firm = rng.standard_normal(F)
    patent = np.abs(patent_firm[fidx] + 0.5 * rng.standard_normal(n))
    patent_stock = np.log1p(pd.Series(np.expm1(patent)).groupby(fidx).cumsum().to_numpy())
    patent_app = patent + 0.2 * np.abs(rng.standard_normal(n))
    industry_word = rng.normal(0, 0.5, cfg.n_industries)
    word = (1.0 + cfg.patent_slope * patent + industry_word[ind]
            + 0.05 * (controls["Size"] - 22.35) + resid)

    # fixed-effect structure of outcomes
    sc = {**_default_fe_scales(), **cfg.fe_scales}

    def fe_draw():
        return (sc["firm"] * rng.standard_normal(F)[fidx]
                + sc["year"] * rng.standard_normal(T)[tidx]
                + sc["industry_year"] * rng.standard_normal((cfg.n_industries, T))[ind, tidx]
                + sc["province_year"] * rng.standard_normal((cfg.n_provinces, T))[prov, tidx])

    ctrl_part = sum(cfg.control_coefs.get(k, 0.0) * controls[k] for k in CONTROLS)
    d = treat * post

    # heterogeneity attribute, moderators and the remaining descriptive columns
    split_firm = rng.standard_normal(F)
    split_var = split_firm[fidx] + 0.3 * rng.standard_normal(n)
    high = split_firm > np.median(split_firm)
    extra = {
        "Mshare": np.clip(0.15 + 0.1 * rng.standard_normal(F)[fidx] + 0.03 * rng.standard_normal(n), 0, 1),
        "ATT": np.abs(rng.standard_normal(F)[fidx] + 0.5 * rng.standard_normal(n)),
        "SC": np.clip(0.3 + 0.15 * rng.standard_normal(n), 0, 1),
        "Bank": rng.standard_normal(F)[fidx],
        "IT_ratio": rng.standard_normal(n),
        "no_entry": (rng.random(F) < 0.1)[fidx].astype(float),
        "Violation": (rng.random(n) < 0.1 + 0.05 * (resid > 0)).astype(float),
        "Inquiry": (rng.random(n) < 0.08).astype(float),
        "Innov_Sub": (rng.random(n) < 0.3 + 0.1 * (resid > 0)).astype(float),
        "SplitVar": split_var,
    }

    # treatment effect path
    if cfg.event_path is not None:
        effect = np.array([cfg.event_path.get(int(e), 0.0) for e in event_time]) * treat
        path = dict(cfg.event_path)
    else:
        beta_f = np.full(F, cfg.beta_treat)
        if cfg.beta_treat_split is not None:
            beta_f[high] = cfg.beta_treat_split
        effect = beta_f[fidx] * d
        path = {int(e): (cfg.beta_treat if e >= 0 else 0.0) for e in np.unique(event_time)}
    if cfg.preset == "did_violated_pretrend":
        effect = effect + cfg.pretrend * treat * (event_time + 1)
        path = {e: v + cfg.pretrend * (e + 1) for e, v in path.items()}
    for name, (main, inter) in cfg.moderator_effects.items():
        effect = effect + main * extra[name] + inter * d * extra[name]

    base = 1.6 + ctrl_part + effect
    selection_info = {}
    selected = np.ones(n, dtype=bool)
    if cfg.preset == "sur_system":
        errs = rng.multivariate_normal(np.zeros(len(SUR_OUTCOMES)), cfg.sigma, size=n,
                                       method="cholesky") * cfg.noise_scale
        outcomes = {}
        for k, name in enumerate(SUR_OUTCOMES):
            outcomes[name] = fe_draw() + ctrl_part * (k == 0) + cfg.sur_coefs[k] * d + errs[:, k]
        debt_fc, debt_flow = outcomes["DebtFC"], outcomes["DebtFlow"]
    else:
        if cfg.preset == "selection":
            v = rng.standard_normal(n)
            w = rng.standard_normal(n)
            u = cfg.selection_rho * v + np.sqrt(1 - cfg.selection_rho ** 2) * w
            g = cfg.selection_coefs
            index = (g.get("const", 0.0) + g.get("IT_ratio", 0.0) * extra["IT_ratio"]
                     + g.get("no_entry", 0.0) * extra["no_entry"] + g.get("AIWashing", 0.0) * d)
            selected = index + v > 0
            noise = cfg.noise_scale * u
            selection_info = {"rho": cfg.selection_rho, "coefs": dict(g),
                              "selected_share": float(selected.mean())}
        else:
            noise = _ar1(rng, F, T, cfg.noise_ar, cfg.noise_scale).ravel()
        debt_fc = fe_draw() + base + noise
        debt_fc = np.where(selected, debt_fc, np.nan)
        debt_flow = fe_draw() + 0.5 * rng.standard_normal(n)
        outcomes = {}

    frame = pd.DataFrame({
        "firm_id": firm, "year": year,
        "industry": np.array([f"C{j + 1:02d}" for j in range(cfg.n_industries)])[ind],
        "province": np.array([f"P{k + 1:02d}" for k in range(cfg.n_provinces)])[prov],
        "DebtFC": debt_fc, "DebtFlow": debt_flow,
        "AIWord": word, "AIPatent": patent, "AIPatentStock": patent_stock,
        "AIPatentApp": patent_app,
        **controls, **extra,
        "Treat_true": treat,
    })
    if cfg.preset == "sur_system":
        frame["AIWordIntensity"] = outcomes["AIWordIntensity"]
        frame["AIPatentOutput"] = outcomes["AIPatentOutput"]
    if cfg.preset == "selection":
        frame["selected"] = selected.astype(float)
    meta = {name: VariableDef(name, "regressor") for name in frame.columns
            if name not in ("firm_id", "year", "industry", "province")}
    meta["DebtFC"] = VariableDef("DebtFC", "outcome", units="percent of liabilities")
    for name in ("Mshare", "ATT", "SC", "Bank"):
        meta[name] = VariableDef(name, "moderator")
    panel = PanelDataset(frame, meta)
    truth = GroundTruth(
        firm_ids=firm_ids, treated=treated, beta_treat=cfg.beta_treat, event_path=path,
        policy_year=cfg.policy_year, selection=selection_info, sur_sigma=cfg.sigma,
        sur_coefs=cfg.sur_coefs, residual_ar=cfg.residual_ar, planted_residuals=resid,
        moderator_effects=dict(cfg.moderator_effects),
        beta_by_split=({"low": cfg.beta_treat, "high": cfg.beta_treat_split}
                       if cfg.beta_treat_split is not None else {}),
    )
    return panel, truth


def replication_seed(seed: int, index: int) -> int:
    """Seed of replication ``index``, derived only from (seed, index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def replicate(cfg: DgpConfig, n_reps: int, fn: Callable, workers: int = 1) -> list:
    """Apply ``fn(panel, truth)`` to ``n_reps`` independent draws, in order."""
    from ._parallel import pmap

    def one(r):
        return fn(*generate_panel(replace(cfg, seed=replication_seed(cfg.seed, r))))

    return pmap(one, range(n_reps), workers)


def write_panel(panel: PanelDataset, truth: GroundTruth, outdir) -> tuple[Path, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = outdir / "panel.csv", outdir / "ground_truth.json"
    panel.to_csv(csv_path)
    json_path.write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=1))
    return csv_path, json_path
