"""Two-step selection correction with an inverse Mills ratio regressor."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import special

from ..errors import ConfigError, DataError
from ..panel import PanelDataset
from ..regress import MleResult, RegressionResult, binary_mle, inverse_mills
from .did import DidSpec, did_estimate, treatment_term

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionSpec:
    """Selection equation: ``selected ~ regressors + instrument`` (probit).

    A regressor equal to the DID spec's ``interaction_name`` refers to the
    treatment term ``Treat * Post``.
    """

    selected: str = "selected"
    regressors: tuple = ("no_entry",)
    instrument: str = "IT_ratio"

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))


@dataclass
class HeckmanResult:
    first_stage: MleResult
    imr: np.ndarray  # per row, NaN outside the selected sample
    second_stage: RegressionResult
    n_clamped: int = 0

    @property
    def imr_coef(self) -> float:
        return self.second_stage.coef("imr")

    @property
    def imr_p(self) -> float:
        return self.second_stage.pvalue("imr")

    def to_dict(self) -> dict:
        return {"first_stage": self.first_stage.to_dict(),
                "second_stage": self.second_stage.to_dict(),
                "imr": {"estimate": self.imr_coef, "se": self.second_stage.se("imr"),
                        "p": self.imr_p},
                "n_clamped": self.n_clamped}


def heckman_two_stage(data: PanelDataset, selection: SelectionSpec, outcome: DidSpec,
                      floor: float = 1e-12) -> HeckmanResult:
    """Probit selection on all rows, then the DID on selected rows plus the IMR.

    Linear indices whose normal CDF falls below ``floor`` are clamped
    before the ratio is taken. Second-stage standard errors ignore the
    estimated first stage.
    """
    if selection.instrument in outcome.controls:
        raise ConfigError([f"instrument {selection.instrument!r} must not be an outcome control"])
    cols = [selection.selected, selection.instrument,
            *(r for r in selection.regressors if r != outcome.interaction_name)]
    missing = [c for c in cols if c not in data]
    if missing:
        raise DataError(f"selection columns not in data: {missing}")
    d = treatment_term(data, outcome)
    regs = [d if r == outcome.interaction_name else data.column(r)
            for r in selection.regressors]
    X = np.column_stack(regs + [data.column(selection.instrument)])
    s = data.column(selection.selected)
    cluster = None if outcome.cluster is None else data.key(outcome.cluster)
    first = binary_mle(s, X, link="probit", cluster=cluster,
                       names=[*selection.regressors, selection.instrument])
    index = first.linear_index(X)
    lo = special.ndtri(floor)
    clamped = np.isfinite(index) & (index < lo)
    if clamped.any():
        msg = f"{int(clamped.sum())} selection indices clamped at Phi = {floor:g}"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    imr = inverse_mills(np.where(clamped, lo, index))
    imr[~(s == 1)] = np.nan
    aug = data.with_columns(imr=imr)
    spec = replace(outcome, controls=(*outcome.controls, "imr"))
    second = did_estimate(aug.subset(s == 1), spec)
    return HeckmanResult(first, imr, second, int(clamped.sum()))
