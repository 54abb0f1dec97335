"""Core domain types: samples, datasets, test functions, traces and reports.

A calibrated predictor is never stored as a table of values. It is an
initializer plus an ordered list of projected update steps, each referencing
a test function by id. Replaying the steps on any sample (seen or unseen)
reproduces the predictor exactly, which is what makes out-of-sample
application possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InvariantViolation,
    UnknownGroupId,
)
from .projections import BoxSpec, ProjectionSpec, SimplexSpec, project

KIND_TEXTGEN = "textgen"
KIND_HIERARCHY = "hierarchy"
KIND_SEGMENTATION = "segmentation"
KIND_GENERIC = "generic"
KINDS = (KIND_TEXTGEN, KIND_HIERARCHY, KIND_SEGMENTATION, KIND_GENERIC)


def noise_uniform(seed: int, half_width: float, size: int) -> np.ndarray:
    """Seeded uniform noise on [-half_width, half_width].

    Uses the counter-based Philox generator so the draw is reproducible
    across platforms and independent of call order.
    """
    if half_width == 0.0:
        return np.zeros(size)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return rng.uniform(-half_width, half_width, size)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    group_bits: frozenset
    scores: np.ndarray
    label: Any  # int (class/token index) or 0/1 np.ndarray (binary vector)
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if not np.all(np.isfinite(self.scores)):
            raise InvariantViolation(f"sample {self.sample_id}: non-finite scores")


class Dataset:
    """An ordered, immutable calibration set.

    Empirical expectations are uniform averages over the samples. Group
    membership masks and the stacked score matrix are precomputed once.
    """

    def __init__(self, samples, score_dim: int, group_universe, kind: str):
        if len(samples) == 0:
            raise EmptyDataset("dataset must be non-empty")
        if kind not in KINDS:
            raise InvariantViolation(f"unknown dataset kind {kind!r}")
        self.samples = list(samples)
        self.score_dim = int(score_dim)
        self.group_universe = tuple(group_universe)
        self.kind = kind
        universe = set(self.group_universe)
        for s in self.samples:
            if s.scores.shape != (self.score_dim,):
                raise DimensionMismatch(
                    f"sample {s.sample_id}: score dim {s.scores.shape[0]} != {self.score_dim}"
                )
            if not set(s.group_bits) <= universe:
                raise InvariantViolation(
                    f"sample {s.sample_id}: groups {set(s.group_bits) - universe} outside universe"
                )
        self.scores_matrix = np.stack([s.scores for s in self.samples])
        self._masks = {
            g: np.array([g in s.group_bits for s in self.samples]) for g in self.group_universe
        }

    def __len__(self):
        return len(self.samples)

    def group_mask(self, group_id) -> np.ndarray:
        if group_id not in self._masks:
            raise UnknownGroupId(f"group {group_id!r} not in universe")
        return self._masks[group_id]

    def labels_int(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples])


@dataclass(frozen=True)
class CopyScores:
    """Initializer f0(x) = h(x): start from the raw score vector."""

    def batch(self, data: Dataset) -> np.ndarray:
        return data.scores_matrix.copy()

    def single(self, sample: Sample) -> np.ndarray:
        return sample.scores.copy()

    def to_dict(self):
        return {"rule": "copy_scores"}


@dataclass(frozen=True)
class ConstantInit:
    """Initializer f0(x) = c: a constant (typically a scalar threshold)."""

    value: float
    dim: int = 1

    def batch(self, data: Dataset) -> np.ndarray:
        return np.full((len(data), self.dim), float(self.value))

    def single(self, sample: Sample) -> np.ndarray:
        return np.full(self.dim, float(self.value))

    def to_dict(self):
        return {"rule": "constant", "value": self.value, "dim": self.dim}


InitRule = CopyScores | ConstantInit


def init_rule_from_dict(d: dict) -> InitRule:
    if d["rule"] == "copy_scores":
        return CopyScores()
    if d["rule"] == "constant":
        return ConstantInit(value=d["value"], dim=d.get("dim", 1))
    raise InvariantViolation(f"unknown init rule {d['rule']!r}")


@dataclass(frozen=True)
class GroupFunction:
    """One test function g: (f(x), x) -> R^l with a pointwise norm bound.

    ``batch`` evaluates g on every sample at once given the current (n, l)
    predictor values; ``single`` evaluates on one sample for trace replay.
    Both are pure and must agree bit-exactly row by row.
    """

    g_id: str
    out_dim: int
    norm_bound: float
    batch: Callable[[np.ndarray, Dataset], np.ndarray]
    single: Callable[[np.ndarray, Sample], np.ndarray]
    description: str = ""


@dataclass(frozen=True)
class MappingFunctional:
    """The per-sample residual s whose inner products with g are driven below alpha.

    ``stats_pass`` (optional) reduces the whole dataset to shared statistics
    (e.g. the mean predictor value) consumed by every per-sample evaluation.
    """

    s_id: str
    out_dim: int
    s_inf_bound: float
    batch: Callable[[np.ndarray, Dataset, Any], np.ndarray]
    stats_pass: Optional[Callable[[np.ndarray, Dataset], Any]] = None
    description: str = ""


@dataclass(frozen=True)
class TraceStep:
    g_id: str
    eta: float


@dataclass
class PredictorTrace:
    """The learned predictor: initializer + projected update steps.

    ``functions`` maps the g_ids referenced by steps to their evaluators so
    the trace is replayable standalone.
    """

    init: InitRule
    projection: ProjectionSpec
    steps: list = field(default_factory=list)
    functions: dict = field(default_factory=dict)

    def replay_batch(self, data: Dataset) -> np.ndarray:
        values = self.init.batch(data)
        if values.ndim == 1:
            values = values[:, None]
        for step in self.steps:
            g = self._resolve(step.g_id)
            gv = np.asarray(g.batch(values, data), dtype=np.float64)
            if gv.ndim == 1:
                gv = gv[:, None]
            values = project(values - step.eta * gv, self.projection)
        return values

    def replay_single(self, sample: Sample) -> np.ndarray:
        from .projections import project_simplex

        value = self.init.single(sample)
        for step in self.steps:
            g = self._resolve(step.g_id)
            gv = np.asarray(g.single(value, sample), dtype=np.float64)
            moved = value - step.eta * gv
            if isinstance(self.projection, SimplexSpec):
                value = project_simplex(moved)
            else:
                value = np.minimum(np.maximum(moved, self.projection.lo), self.projection.hi)
        return value

    def _resolve(self, g_id: str) -> GroupFunction:
        if g_id not in self.functions:
            raise UnknownGroupId(f"trace references unknown function {g_id!r}")
        return self.functions[g_id]

    def to_dict(self) -> dict:
        proj = (
            {"kind": "simplex", "dim": self.projection.dim}
            if isinstance(self.projection, SimplexSpec)
            else {"kind": "box", "lo": self.projection.lo, "hi": self.projection.hi}
        )
        return {
            "init": self.init.to_dict(),
            "projection": proj,
            "steps": [[st.g_id, st.eta] for st in self.steps],
        }


def projection_from_dict(d: dict) -> ProjectionSpec:
    if d["kind"] == "simplex":
        return SimplexSpec(dim=d["dim"])
    return BoxSpec(lo=d["lo"], hi=d["hi"])


SPLIT_EMPIRICAL = "empirical"
SPLIT_2T = "split2t"


@dataclass
class GmcConfig:
    alpha: float
    eta: Optional[float] = None  # default eta = alpha / (K_L * B)
    max_iter: int = 10_000
    split_mode: str = SPLIT_EMPIRICAL
    rng_seed: int = 0
    selection: str = "first"  # "first" (sorted g_id order) or "max"

    def __post_init__(self):
        if self.alpha <= 0:
            raise InvariantViolation("alpha must be > 0")
        if self.eta is not None and self.eta <= 0:
            raise InvariantViolation("eta must be > 0")
        if self.max_iter < 0:
            raise InvariantViolation("max_iter must be >= 0")
        if self.split_mode not in (SPLIT_EMPIRICAL, SPLIT_2T):
            raise InvariantViolation(f"unknown split mode {self.split_mode!r}")
        if self.selection not in ("first", "max"):
            raise InvariantViolation(f"unknown selection {self.selection!r}")


@dataclass
class AuditReport:
    per_g_violation: dict
    max_violation: float
    iterations_used: int
    halted_clean: bool
    potential_trace: list
    potential_initial: Optional[float] = None
    threshold: Optional[float] = None
    # final in-loop predictor values on the calibration data; kept for
    # replay-consistency checks, not serialized
    calibration_values: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "per_g_violation": {k: float(v) for k, v in self.per_g_violation.items()},
            "max_violation": float(self.max_violation),
            "iterations_used": self.iterations_used,
            "halted_clean": self.halted_clean,
            "potential_trace": [float(v) for v in self.potential_trace],
            "potential_initial": None
            if self.potential_initial is None
            else float(self.potential_initial),
            "threshold": None if self.threshold is None else float(self.threshold),
        }
