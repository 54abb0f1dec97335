"""Exact Euclidean projections onto the feasible sets used by the calibration loop.

Two sets are supported: the probability simplex (distribution-valued
predictors) and a closed interval (threshold-valued predictors). The batch
variants apply the same arithmetic row by row, so replaying a single sample
reproduces the in-loop values bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBox, NonFiniteInput


@dataclass(frozen=True)
class SimplexSpec:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidBox(f"simplex dimension must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class BoxSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidBox(f"box requires lo < hi, got [{self.lo}, {self.hi}]")


ProjectionSpec = SimplexSpec | BoxSpec


def project_simplex(v: np.ndarray) -> np.ndarray:
    """l2-project a vector onto the probability simplex.

    Sort-and-threshold method: sort descending, find the largest prefix whose
    shifted average stays below its smallest element, subtract that average
    and clip at zero. O(m log m), exact up to round-off. Handles all-negative
    and other degenerate inputs without special cases.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("simplex projection requires finite input")
    return _simplex_rows(v[None, :])[0]


def _simplex_rows(v: np.ndarray) -> np.ndarray:
    # Shared kernel for the single-vector and batch entry points. The
    # per-row arithmetic is identical either way (sort, cumsum, threshold),
    # which is what the bit-exact replay contract relies on.
    m = v.shape[1]
    s = np.sort(v, axis=1)[:, ::-1]
    cumsum = np.cumsum(s, axis=1)
    ks = np.arange(1, m + 1, dtype=np.float64)
    thresholds = (cumsum - 1.0) / ks
    # rho: last index where the sorted coordinate exceeds the running threshold
    valid = s > thresholds
    rho = m - 1 - np.argmax(valid[:, ::-1], axis=1)
    tau = thresholds[np.arange(v.shape[0]), rho]
    return np.maximum(v - tau[:, None], 0.0)


def project_simplex_rows(v: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection of an (n, m) array."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("simplex projection requires finite input")
    return _simplex_rows(v)


def project_box(v: float, lo: float, hi: float) -> float:
    """Clamp a scalar to [lo, hi]."""
    if not lo < hi:
        raise InvalidBox(f"box requires lo < hi, got [{lo}, {hi}]")
    return float(np.minimum(np.maximum(v, lo), hi))


def project(values: np.ndarray, spec: ProjectionSpec) -> np.ndarray:
    """Project an (n, d) array of per-sample values row by row."""
    if isinstance(spec, SimplexSpec):
        return project_simplex_rows(values)
    return np.minimum(np.maximum(values, spec.lo), spec.hi)
