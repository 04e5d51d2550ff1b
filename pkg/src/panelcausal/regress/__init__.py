"""Estimation engine: fixed-effect least squares and binary-response MLE."""

from .absorb import Absorber, FixedEffectSpec, absorbed_degrees, demean_absorb, group_codes, singleton_mask
from .binary import MarginalEffects, MleResult, binary_mle, inverse_mills, marginal_effects
from .ols import CollinearityWarning, RegressionResult, independent_columns, ols_cluster, stars

__all__ = [
    "Absorber", "FixedEffectSpec", "absorbed_degrees", "demean_absorb", "group_codes",
    "singleton_mask", "MarginalEffects", "MleResult", "binary_mle", "inverse_mills",
    "marginal_effects", "CollinearityWarning", "RegressionResult", "independent_columns",
    "ols_cluster", "stars",
]
