"""DID-family estimators, reweighting, selection correction and permutation inference."""

from .did import (
    DEFAULT_CONTROLS, FOUR_WAY, DidSpec, EventStudyResult, PlaceboResult, SubsampleResult,
    did_estimate, event_study, ks_uniform, moderated_did, placebo_permutation, split_groups,
    subsample_compare, treatment_term,
)
from .heckman import HeckmanResult, SelectionSpec, heckman_two_stage
from .weights import (
    WeightVector, balance_diagnostics, entropy_balance, entropy_balance_yearly, entropy_weights,
    nearest_matches, psm_match, standardized_bias,
)

__all__ = [
    "DEFAULT_CONTROLS", "FOUR_WAY", "DidSpec", "EventStudyResult", "PlaceboResult",
    "SubsampleResult", "did_estimate", "event_study", "ks_uniform", "moderated_did",
    "placebo_permutation", "split_groups", "subsample_compare", "treatment_term",
    "HeckmanResult", "SelectionSpec", "heckman_two_stage", "WeightVector",
    "balance_diagnostics", "entropy_balance", "entropy_balance_yearly", "entropy_weights",
    "nearest_matches", "psm_match", "standardized_bias",
]
