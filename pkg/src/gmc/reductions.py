"""Presets mapping related calibration notions onto the one engine.

Each preset returns a (residual, test-function class) pair ready for the
main loop: scalar residual correlation control subsumes multiaccuracy-style
guarantees, one-hot residuals against distinguisher vectors give outcome
indistinguishability, bucketed quantile indicators give batch multivalidity,
and a linearized quantile surrogate covers per-group quantile targets.

The linearized quantile preset controls |E[1{x in G'} (q - 1{score <= f})]|
only. This is NOT the squared per-group quantile calibration error: that
quantity averages the squared deviation at every level within the group,
and no finite test-function class reproduces the missing per-level square.
A witness instance where the linearized violation is small while the squared
error is large ships with the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionNotOne, InvalidDelta, InvariantViolation
from .segmentation import build_group_indicator_class
from .textgen import PromptGroup
from .types import Dataset, GroupFunction, MappingFunctional


@dataclass(frozen=True)
class ReductionPreset:
    kind: str  # happymap | oi | multivalid | quantile_linearized | multiaccuracy
    parameters: dict

    def __post_init__(self):
        known = ("happymap", "oi", "multivalid", "quantile_linearized", "multiaccuracy")
        if self.kind not in known:
            raise InvariantViolation(f"unknown preset kind {self.kind!r}")


def happymap_preset(
    s_scalar: MappingFunctional, class_c: Sequence[GroupFunction]
) -> tuple[MappingFunctional, list[GroupFunction]]:
    """Identity embedding: scalar s against an arbitrary scalar class."""
    if s_scalar.out_dim != 1:
        raise DimensionNotOne(f"scalar residual required, got out_dim {s_scalar.out_dim}")
    for c in class_c:
        if c.out_dim != 1:
            raise DimensionNotOne(f"function {c.g_id!r} has out_dim {c.out_dim}")
    return s_scalar, list(class_c)


def multiaccuracy_s() -> MappingFunctional:
    """s = f(x) - y for scalar predictions against 0/1 (or real) labels."""

    def batch(values, data, stats):
        y = np.array([float(s.label) for s in data.samples])
        return (values[:, 0] - y)[:, None]

    return MappingFunctional(
        s_id="prediction_residual",
        out_dim=1,
        s_inf_bound=1.0,
        batch=batch,
        description="f - y",
    )


def multiaccuracy_preset(
    groups: Sequence[PromptGroup],
) -> tuple[MappingFunctional, list[GroupFunction]]:
    """Group-wise mean-prediction accuracy: |E[1{x in A}(f - y)]| <= alpha."""
    return happymap_preset(multiaccuracy_s(), build_group_indicator_class(groups))


def onehot_labels(data: Dataset, class_count: int) -> np.ndarray:
    y = data.labels_int()
    if y.min() < 0 or y.max() >= class_count:
        raise InvariantViolation("labels outside 0..class_count-1")
    out = np.zeros((len(data), class_count))
    out[np.arange(len(data)), y] = 1.0
    return out


def oi_preset(
    discriminators: Sequence[GroupFunction], class_count: int
) -> tuple[MappingFunctional, list[GroupFunction]]:
    """Distinguisher advantage control: s = predicted class distribution - onehot(y)."""
    if class_count < 2:
        raise InvariantViolation("class_count must be >= 2")
    for d in discriminators:
        if d.out_dim != class_count:
            raise DimensionNotOne(
                f"discriminator {d.g_id!r} out_dim {d.out_dim} != {class_count}"
            )

    def batch(values, data, stats):
        return values - onehot_labels(data, class_count)

    s = MappingFunctional(
        s_id="distribution_vs_label",
        out_dim=class_count,
        s_inf_bound=1.0,
        batch=batch,
        description="p_tilde - onehot(y)",
    )
    return s, list(discriminators)


def constant_discriminator(d_id: str, vector: np.ndarray) -> GroupFunction:
    """Discriminator ignoring x and f: a fixed vector in R^K."""
    vec = np.asarray(vector, dtype=np.float64)

    def batch(values, data, _v=vec):
        return np.tile(_v, (values.shape[0], 1))

    def single(value, sample, _v=vec):
        return _v.copy()

    return GroupFunction(
        g_id=d_id,
        out_dim=vec.shape[0],
        norm_bound=float(np.linalg.norm(vec)) or 1.0,
        batch=batch,
        single=single,
        description=f"constant vector {d_id}",
    )


def multivalid_preset(
    bucket_count: int, delta: float, groups: Sequence[PromptGroup]
) -> tuple[MappingFunctional, list[GroupFunction]]:
    """Bucketed quantile validity over a frozen transcript.

    f(x) is a predicted quantile in [0, 1]; the sample's scalar score is the
    realized outcome. s = 1{score <= q} - (1 - delta); the class crosses
    group indicators with indicators of which of the m equal-width buckets
    the prediction falls in (right-closed at 1).
    """
    if bucket_count < 1:
        raise InvariantViolation("bucket_count must be >= 1")
    if not 0 < delta < 1:
        raise InvalidDelta(f"delta must be in (0,1), got {delta}")

    def s_batch(values, data, stats):
        score = data.scores_matrix[:, 0]
        return ((score <= values[:, 0]).astype(np.float64) - (1.0 - delta))[:, None]

    s = MappingFunctional(
        s_id="quantile_coverage_residual",
        out_dim=1,
        s_inf_bound=1.0,
        batch=s_batch,
        description="1{score <= q} - (1 - delta)",
    )

    def in_bucket(q: np.ndarray, i: int) -> np.ndarray:
        lo, hi = (i - 1) / bucket_count, i / bucket_count
        hit = (q >= lo) & (q < hi)
        if i == bucket_count:
            hit |= q == hi  # include the top endpoint
        return hit.astype(np.float64)

    fclass = []
    for sign, sign_ch in ((1.0, "+"), (-1.0, "-")):
        for a in groups:
            for i in range(1, bucket_count + 1):

                def batch(values, data, _a=a, _i=i, _sign=sign):
                    mask = _a.mask(data).astype(np.float64)
                    return (_sign * mask * in_bucket(values[:, 0], _i))[:, None]

                def single(value, sample, _a=a, _i=i, _sign=sign):
                    hit = in_bucket(np.array([value[0]]), _i)[0]
                    return np.array([_sign * hit if _a.member(sample) else 0.0])

                fclass.append(
                    GroupFunction(
                        g_id=f"{sign_ch}{a.a_id}|bucket{i}",
                        out_dim=1,
                        norm_bound=1.0,
                        batch=batch,
                        single=single,
                        description=f"{sign_ch}1[x in {a.a_id}] 1[q in bucket {i}/{bucket_count}]",
                    )
                )
    return s, fclass


def quantile_linearized_preset(
    q: float, groups: Sequence[PromptGroup]
) -> tuple[MappingFunctional, list[GroupFunction]]:
    """Linearized per-group quantile target: s = q - 1{score <= f}.

    See the module docstring for why this is weaker than squared per-group
    quantile calibration error.
    """
    if not 0 < q < 1:
        raise InvariantViolation(f"q must be in (0,1), got {q}")

    def s_batch(values, data, stats):
        score = data.scores_matrix[:, 0]
        return (q - (score <= values[:, 0]).astype(np.float64))[:, None]

    s = MappingFunctional(
        s_id="quantile_linearized_residual",
        out_dim=1,
        s_inf_bound=1.0,
        batch=s_batch,
        description="q - 1{score <= f}",
    )
    return s, build_group_indicator_class(groups)


def squared_quantile_error(
    data: Dataset, f_values: np.ndarray, group: PromptGroup, q: float
) -> float:
    """Level-wise squared quantile calibration error within a group.

    For each distinct predicted value v in the group, squares the gap
    between q and the conditional coverage P(score <= f | f = v), weighted
    by the mass predicting v. Used to witness the linearized preset's
    non-equivalence: level-wise errors of opposite sign cancel in the
    linearized violation but not here.
    """
    mask = group.mask(data)
    if mask.sum() == 0:
        return 0.0
    f = f_values[mask, 0]
    score = data.scores_matrix[mask, 0]
    total = 0.0
    for v in np.unique(f):
        at = f == v
        cov = float(np.mean((score[at] <= v).astype(np.float64)))
        total += at.mean() * (q - cov) ** 2
    return float(total)
