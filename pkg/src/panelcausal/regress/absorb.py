"""Absorption of high-dimensional fixed effects by alternating projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ..errors import ConfigError, ConvergenceError, DataError


@dataclass(frozen=True)
class FixedEffectSpec:
    """Fixed-effect dimensions to absorb.

    Each dimension is a column name (``"firm_id"``) or a pair of column
    names whose interaction forms the groups (``("industry", "year")``).
    """

    dimensions: tuple = ("firm_id", "year")
    tolerance: float = 1e-10
    max_iterations: int = 10_000

    def __post_init__(self):
        dims = tuple(tuple(d) if isinstance(d, (list, tuple)) else d for d in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if not dims:
            raise ConfigError("a fixed-effect spec needs at least one dimension")
        if not self.tolerance > 0:
            raise ConfigError("fixed-effect tolerance must be positive")
        for d in dims:
            if isinstance(d, tuple) and len(d) != 2:
                raise ConfigError(f"interaction dimension {d} must pair exactly two keys")

    @staticmethod
    def label(dim) -> str:
        return dim if isinstance(dim, str) else "#".join(dim)

    @property
    def labels(self) -> list[str]:
        return [self.label(d) for d in self.dimensions]

    def codes(self, data) -> dict[str, np.ndarray]:
        """Integer group codes per dimension for a :class:`PanelDataset` or DataFrame."""
        frame = data if isinstance(data, pd.DataFrame) else data._frame
        out = {}
        for dim in self.dimensions:
            cols = [dim] if isinstance(dim, str) else list(dim)
            for c in cols:
                if c not in frame.columns:
                    raise DataError(f"fixed-effect key {c!r} not in data")
            keys = frame[cols]
            if keys.isna().any().any():
                raise DataError(f"fixed-effect key {self.label(dim)!r} has missing levels")
            out[self.label(dim)] = group_codes(*(keys[c].to_numpy() for c in cols))
        return out

    def to_dict(self):
        return {"dimensions": self.labels, "tolerance": self.tolerance,
                "max_iterations": self.max_iterations}


def group_codes(*keys) -> np.ndarray:
    """Dense 0..L-1 codes for the (joint) levels of one or more key arrays."""
    if len(keys) == 1:
        return pd.factorize(np.asarray(keys[0]), sort=True)[0].astype(np.int64)
    parts = [pd.factorize(np.asarray(k), sort=True)[0].astype(np.int64) for k in keys]
    combined = parts[0]
    for p in parts[1:]:
        combined = combined * (p.max() + 1) + p
    return pd.factorize(combined, sort=True)[0].astype(np.int64)


def singleton_mask(codes: Sequence[np.ndarray]) -> np.ndarray:
    """Rows that survive iterative removal of singleton groups."""
    keep = np.ones(len(codes[0]), dtype=bool)
    while True:
        changed = False
        for c in codes:
            counts = np.bincount(c[keep], minlength=c.max() + 1)
            single = keep & (counts[c] == 1)
            if single.any():
                keep &= ~single
                changed = True
        if not changed or not keep.any():
            return keep


def _nested(inner: np.ndarray, outer: np.ndarray) -> bool:
    """True when every level of ``outer`` sits inside a single level of ``inner``."""
    frame = pd.DataFrame({"i": inner, "o": outer})
    return bool((frame.groupby("o")["i"].nunique() <= 1).all())


def absorbed_degrees(codes: Sequence[np.ndarray], cluster: np.ndarray | None = None) -> int:
    """Degrees of freedom used by the fixed effects.

    Dimensions that are fully redundant (coarser than another dimension,
    e.g. year inside industry-year) count zero. The first two remaining
    dimensions are counted exactly via connected components of their
    bipartite level graph; later dimensions count ``levels - 1``. With
    ``cluster`` given, dimensions nested within clusters are left out,
    which is the count used for the cluster small-sample factor.
    """
    dims = [np.asarray(c) for c in codes]
    if cluster is not None:
        dims = [c for c in dims if not _nested(cluster, c)]
    kept = []
    for i, c in enumerate(dims):
        redundant = any(j != i and _nested(c, d) and (not _nested(d, c) or j < i)
                        for j, d in enumerate(dims))
        if not redundant:
            kept.append(c)
    if not kept:
        return 0
    levels = [int(c.max()) + 1 for c in kept]
    if len(kept) == 1:
        return levels[0]
    a, b = kept[0], kept[1]
    graph = sp.coo_matrix((np.ones(len(a)), (a, b + levels[0])),
                          shape=(levels[0] + levels[1],) * 2)
    n_comp, _ = connected_components(graph, directed=False)
    return levels[0] + levels[1] - n_comp + sum(l - 1 for l in levels[2:])


class Absorber:
    """Within-transform for a fixed set of group codes and optional weights.

    Rows are assumed to be already free of singletons. ``demean`` cycles
    weighted within-group demeaning over the dimensions until the largest
    change in a sweep falls below ``tolerance``.
    """

    def __init__(self, codes: Sequence[np.ndarray], weights: np.ndarray | None = None,
                 tolerance: float = 1e-10, max_iterations: int = 10_000):
        self.codes = [np.asarray(c, dtype=np.int64) for c in codes]
        n = len(self.codes[0])
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.iterations = 0
        self._ops = []
        for c in self.codes:
            c = pd.factorize(c, sort=True)[0]
            n_levels = int(c.max()) + 1
            ind = sp.csr_matrix((np.ones(n), (np.arange(n), c)), shape=(n, n_levels))
            wsum = np.bincount(c, weights=self.weights, minlength=n_levels)
            weighted_t = sp.csr_matrix((self.weights, (c, np.arange(n))), shape=(n_levels, n))
            self._ops.append((ind, weighted_t, wsum))

    def _project(self, X, op):
        ind, weighted_t, wsum = op
        means = (weighted_t @ X) / wsum[:, None]
        return X - ind @ means

    def demean(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float, copy=True)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        if len(self._ops) == 1:
            self.iterations = 1
            out = self._project(X, self._ops[0])
            return out[:, 0] if squeeze else out
        scale = np.maximum(1.0, np.abs(X).max(axis=0))
        for it in range(1, self.max_iterations + 1):
            before = X
            for op in self._ops:
                X = self._project(X, op)
            change = (np.abs(X - before).max(axis=0) / scale).max()
            if change < self.tolerance:
                self.iterations = it
                return X[:, 0] if squeeze else X
        raise ConvergenceError(
            f"fixed-effect absorption did not converge in {self.max_iterations} sweeps "
            f"(last change {change:.3g})")


def demean_absorb(X, codes: Mapping[str, np.ndarray] | Sequence[np.ndarray],
                  tolerance: float = 1e-10, max_iterations: int = 10_000,
                  weights=None, drop_singletons: bool = True):
    """Absorb fixed effects from the columns of ``X``.

    Returns ``(demeaned, keep)`` where ``keep`` marks the rows retained
    after iterative singleton removal; ``demeaned`` covers only those rows.
    """
    codes = list(codes.values()) if isinstance(codes, Mapping) else list(codes)
    X = np.asarray(X, dtype=float)
    keep = singleton_mask(codes) if drop_singletons else np.ones(len(X), dtype=bool)
    w = None if weights is None else np.asarray(weights, dtype=float)[keep]
    absorber = Absorber([c[keep] for c in codes], w, tolerance, max_iterations)
    return absorber.demean(X[keep]), keep
