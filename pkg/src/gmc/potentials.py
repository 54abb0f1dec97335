"""Potential functionals whose derivative is the mapping functional.

The calibration loop halts because every accepted update pushes one of these
scalar functionals down by a fixed amount. Three kinds are provided:

* quadratic: L(f) = 1/2 E ||f(x) - E f(x)||^2 (distribution calibration),
* piecewise-linear coverage: L(lam) = E [sigma*lam(x) - min(lam(x), r(x))]
  where r(x) is the cumulative score at the nearest common ancestor of the
  label and the point prediction, and sigma is the potential's own rate
  parameter (the miscoverage rate 1 - target when driving coverage to a
  target),
* piecewise-linear FNR: L(lam) = E [(1-sigma)*lam(x)
  - mean over positive pixels of min(lam(x), h_i(x))].

``check_smoothness`` provides the statistical audit of the smoothness and
gradient assumptions that cannot be verified symbolically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import KindMismatch
from .types import (
    KIND_GENERIC,
    KIND_HIERARCHY,
    KIND_SEGMENTATION,
    KIND_TEXTGEN,
    Dataset,
    MappingFunctional,
    PredictorTrace,
)

QUADRATIC = "quadratic"
PIECEWISE_COVERAGE = "piecewise_coverage"
PIECEWISE_FNR = "piecewise_fnr"

_COMPATIBLE = {
    QUADRATIC: (KIND_TEXTGEN, KIND_GENERIC),
    PIECEWISE_COVERAGE: (KIND_HIERARCHY,),
    PIECEWISE_FNR: (KIND_SEGMENTATION,),
}


@dataclass
class QuadraticPotential:
    kind: str = QUADRATIC
    smoothness: float = 1.0
    c_lower: float = 0.0
    c_upper: float = 1.0

    def value_from_values(self, values: np.ndarray, data: Dataset) -> float:
        mean = values.mean(axis=0)
        return float(0.5 * np.mean(np.sum((values - mean) ** 2, axis=1)))

    def kink_locations(self, data: Dataset):
        return None  # smooth everywhere


@dataclass
class CoveragePotential:
    """sigma here is the potential's rate parameter; bounds follow the
    closed forms C_u = (sigma+1)M (initializer at lam = M) and
    C_l = (sigma-1)M for cumulative scores in [-M, M]."""

    sigma: float
    m_bound: float
    rq_values: Callable[[Dataset], np.ndarray]
    smoothness: float = 1.0  # density bound K_p of the randomized scores
    # per-sample lower edge of the region where the output rule is out of its
    # root-fallback regime; the potential's slope matches the coverage
    # residual only above it
    fallback_floor: Optional[Callable[[Dataset], np.ndarray]] = None
    kind: str = field(default=PIECEWISE_COVERAGE)

    @property
    def c_lower(self) -> float:
        return (self.sigma - 1.0) * self.m_bound

    @property
    def c_upper(self) -> float:
        return (self.sigma + 1.0) * self.m_bound

    def value_from_values(self, values: np.ndarray, data: Dataset) -> float:
        lam = values[:, 0]
        rq = self.rq_values(data)
        return float(np.mean(self.sigma * lam - np.minimum(lam, rq)))

    def kink_locations(self, data: Dataset):
        return self.rq_values(data)[:, None]


@dataclass
class FnrPotential:
    """sigma is the target false-negative rate."""

    sigma: float
    m_bound: float
    noisy_scores: Callable[[Dataset], np.ndarray]
    smoothness: float = 1.0
    labels: Optional[Callable[[Dataset], np.ndarray]] = None
    kind: str = field(default=PIECEWISE_FNR)

    def _labels(self, data: Dataset) -> np.ndarray:
        if self.labels is not None:
            return self.labels(data)
        return np.stack([s.label for s in data.samples]).astype(np.float64)

    @property
    def c_lower(self) -> float:
        return -(1.0 - self.sigma) * self.m_bound

    @property
    def c_upper(self) -> float:
        return self.sigma * self.m_bound

    def value_from_values(self, values: np.ndarray, data: Dataset) -> float:
        lam = values[:, 0]
        scores = self.noisy_scores(data)
        labels = self._labels(data)
        npos = labels.sum(axis=1)
        covered = labels * np.minimum(lam[:, None], scores)
        return float(np.mean((1.0 - self.sigma) * lam - covered.sum(axis=1) / npos))

    def kink_locations(self, data: Dataset):
        # kinks at every positive pixel's noisy score
        scores = self.noisy_scores(data).copy()
        labels = self._labels(data).astype(bool)
        scores[~labels] = np.nan  # negative pixels contribute no kink
        return scores


Potential = QuadraticPotential | CoveragePotential | FnrPotential


def potential_value(potential: Potential, trace: PredictorTrace, data: Dataset) -> float:
    """Exact empirical value of the potential for a trace on a dataset."""
    if data.kind not in _COMPATIBLE[potential.kind]:
        raise KindMismatch(f"potential {potential.kind} incompatible with {data.kind} data")
    values = trace.replay_batch(data)
    return potential.value_from_values(values, data)


@dataclass
class SmoothnessReport:
    passed: bool
    smoothness_trials: int
    smoothness_failures: int
    kink_crossing_trials: int
    worst_slack: float
    gradient_trials: int
    gradient_max_rel_err: float
    gradient_failures: int


def _sample_feasible(
    potential: Potential, rng: np.random.Generator, n: int, dim: int, data: Dataset
) -> np.ndarray:
    if potential.kind == QUADRATIC:
        return rng.dirichlet(np.ones(dim), size=n)
    m = potential.m_bound
    lo = np.full(n, -m)
    floor_fn = getattr(potential, "fallback_floor", None)
    if floor_fn is not None:
        lo = np.maximum(lo, np.minimum(floor_fn(data), m - 1e-6))
    return (lo + rng.uniform(0.0, 1.0, n) * (m - lo))[:, None]


def _eval_s(s: MappingFunctional, values: np.ndarray, data: Dataset) -> np.ndarray:
    stats = s.stats_pass(values, data) if s.stats_pass is not None else None
    out = np.asarray(s.batch(values, data, stats), dtype=np.float64)
    return out[:, None] if out.ndim == 1 else out


def check_smoothness(
    potential: Potential,
    s: MappingFunctional,
    data: Dataset,
    trials: int = 100,
    seed: int = 0,
    rel_tol: float = 1e-4,
) -> SmoothnessReport:
    """Statistical audit of the (s, potential) pairing.

    For random feasible pairs (f1, f2) verifies the smoothness inequality
    L(f1) - L(f2) <= E<s(f2), f1 - f2> + K/2 E||f1 - f2||^2, and checks that
    E<s(f), w> matches the central finite difference of L along random
    directions w. Piecewise-linear kinds are exact only away from their
    kinks; trials whose perturbation interval straddles a kink are counted
    separately and excluded from the pass verdict.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n = len(data)
    dim = data.score_dim if potential.kind == QUADRATIC else 1
    kinks = potential.kink_locations(data)

    smooth_fail = 0
    kink_trials = 0
    clean_trials = 0
    worst = -np.inf
    tol = 1e-9
    for _ in range(trials):
        f1 = _sample_feasible(potential, rng, n, dim, data)
        f2 = _sample_feasible(potential, rng, n, dim, data)
        crossing = False
        if kinks is not None:
            lo = np.minimum(f1[:, 0], f2[:, 0])[:, None]
            hi = np.maximum(f1[:, 0], f2[:, 0])[:, None]
            with np.errstate(invalid="ignore"):
                crossing = bool(np.any((kinks >= lo) & (kinks <= hi)))
        lhs = potential.value_from_values(f1, data) - potential.value_from_values(f2, data)
        s2 = _eval_s(s, f2, data)
        diff = f1 - f2
        rhs = float(np.mean(np.sum(s2 * diff, axis=1))) + potential.smoothness / 2.0 * float(
            np.mean(np.sum(diff**2, axis=1))
        )
        slack = lhs - rhs
        if crossing:
            kink_trials += 1
            continue
        clean_trials += 1
        worst = max(worst, slack)
        if slack > tol:
            smooth_fail += 1

    grad_fail = 0
    grad_worst = 0.0
    eps = 1e-5
    for _ in range(trials):
        f = _sample_feasible(potential, rng, n, dim, data)
        w = rng.standard_normal((n, dim))
        if kinks is not None:
            lo = (f[:, 0] - eps * np.abs(w[:, 0]))[:, None]
            hi = (f[:, 0] + eps * np.abs(w[:, 0]))[:, None]
            with np.errstate(invalid="ignore"):
                if np.any((kinks >= lo) & (kinks <= hi)):
                    continue  # kink-crossing direction: finite difference undefined
        sv = _eval_s(s, f, data)
        analytic = float(np.mean(np.sum(sv * w, axis=1)))
        numeric = (
            potential.value_from_values(f + eps * w, data)
            - potential.value_from_values(f - eps * w, data)
        ) / (2.0 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        rel = abs(analytic - numeric) / denom
        grad_worst = max(grad_worst, rel)
        if rel > rel_tol:
            grad_fail += 1

    return SmoothnessReport(
        passed=(smooth_fail == 0 and grad_fail == 0),
        smoothness_trials=clean_trials,
        smoothness_failures=smooth_fail,
        kink_crossing_trials=kink_trials,
        worst_slack=float(worst),
        gradient_trials=trials,
        gradient_max_rel_err=float(grad_worst),
        gradient_failures=grad_fail,
    )
