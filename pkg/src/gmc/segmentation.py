"""Per-image threshold calibration for group-conditional false negative rate.

Each sample carries pixel scores and a binary mask; prediction at threshold
lambda marks pixel i positive when its noisy score exceeds lambda. The FNR
of a sample is the fraction of true positives missed. Calibration drives
|group FNR - target| below alpha for every group simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyCalibration,
    EmptyClass,
    InvariantViolation,
    NoPositivePixels,
)
from .potentials import FnrPotential
from .projections import BoxSpec
from .textgen import PromptGroup
from .types import (
    KIND_SEGMENTATION,
    AuditReport,
    ConstantInit,
    Dataset,
    GmcConfig,
    GroupFunction,
    MappingFunctional,
    PredictorTrace,
    Sample,
    noise_uniform,
)


@dataclass(frozen=True)
class FnrTarget:
    """sigma is the target FNR value itself."""

    sigma: float
    alpha: float
    m_bound: float
    f0: float
    noise_half_width: float = 0.0

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise InvariantViolation(f"sigma must be in (0,1), got {self.sigma}")
        if self.alpha <= 0:
            raise InvariantViolation(f"alpha must be > 0, got {self.alpha}")
        if self.m_bound <= 0:
            raise InvariantViolation(f"M must be > 0, got {self.m_bound}")
        if not -self.m_bound <= self.f0 <= self.m_bound:
            raise InvariantViolation("f0 must lie inside [-M, M]")
        if self.noise_half_width < 0:
            raise InvariantViolation("noise_half_width must be >= 0")


def _label_vector(sample: Sample) -> np.ndarray:
    lab = np.asarray(sample.label, dtype=np.float64)
    if lab.shape != sample.scores.shape:
        raise InvariantViolation(
            f"sample {sample.sample_id}: label length {lab.shape} != scores {sample.scores.shape}"
        )
    return lab


def noisy_pixel_scores(sample: Sample, noise_half_width: float) -> np.ndarray:
    return sample.scores + noise_uniform(
        sample.noise_seed, noise_half_width, sample.scores.shape[0]
    )


def fnr(sample: Sample, lam: float, noise_half_width: float = 0.0) -> float:
    """1 - (detected positives / total positives) at threshold lam."""
    lab = _label_vector(sample)
    npos = lab.sum()
    if npos == 0:
        raise NoPositivePixels(f"sample {sample.sample_id} has no positive pixels")
    h = noisy_pixel_scores(sample, noise_half_width)
    return float(1.0 - np.sum(lab * (h > lam)) / npos)


class SegmentationContext:
    """Per-dataset caches of noisy scores, masks and positive counts."""

    def __init__(self, data: Dataset, noise_half_width: float):
        self.data = data
        self.noise_half_width = float(noise_half_width)
        self.labels = np.stack([_label_vector(s) for s in data.samples])
        self.npos = self.labels.sum(axis=1)
        bad = np.nonzero(self.npos == 0)[0]
        if bad.size:
            raise NoPositivePixels(
                f"samples without positive pixels: "
                f"{[data.samples[i].sample_id for i in bad[:5]]}"
            )
        self.noisy = np.stack(
            [noisy_pixel_scores(s, noise_half_width) for s in data.samples]
        )
        self._derived: dict = {}

    def for_data(self, data: Dataset) -> "SegmentationContext":
        if data is self.data:
            return self
        ctx = self._derived.get(id(data))
        if ctx is None or ctx.data is not data:
            ctx = SegmentationContext(data, self.noise_half_width)
            self._derived[id(data)] = ctx
        return ctx

    def fnr_values(self, lam: np.ndarray) -> np.ndarray:
        detected = (self.labels * (self.noisy > lam[:, None])).sum(axis=1)
        return 1.0 - detected / self.npos


def fnr_s(ctx: SegmentationContext, sigma: float) -> MappingFunctional:
    """Residual FNR(lambda) - sigma; the slope of the FNR potential."""

    def batch(values, data, stats):
        return (ctx.for_data(data).fnr_values(values[:, 0]) - sigma)[:, None]

    return MappingFunctional(
        s_id="fnr_residual",
        out_dim=1,
        s_inf_bound=1.0,
        batch=batch,
        description="FNR - sigma",
    )


def build_group_indicator_class(groups: Sequence[PromptGroup]) -> list[GroupFunction]:
    """Signed scalar indicators +-1{x in A} for each group."""
    if len(groups) == 0:
        raise EmptyClass("need at least one group")
    out = []
    for sign, sign_ch in ((1.0, "+"), (-1.0, "-")):
        for a in groups:

            def batch(values, data, _a=a, _sign=sign):
                return (_sign * _a.mask(data).astype(np.float64))[:, None]

            def single(value, sample, _a=a, _sign=sign):
                return np.array([_sign if _a.member(sample) else 0.0])

            out.append(
                GroupFunction(
                    g_id=f"{sign_ch}{a.a_id}",
                    out_dim=1,
                    norm_bound=1.0,
                    batch=batch,
                    single=single,
                    description=f"{sign_ch}1[x in {a.a_id}]",
                )
            )
    return out


def calibrate_fnr(
    data: Dataset,
    target: FnrTarget,
    groups: Sequence[PromptGroup],
    eta: Optional[float] = None,
    max_iter: int = 200_000,
) -> tuple[PredictorTrace, AuditReport]:
    """Per-image thresholds with |group FNR - sigma| <= alpha for all groups."""
    from .core import run_gmc

    if data.kind != KIND_SEGMENTATION:
        raise InvariantViolation(f"expected segmentation data, got {data.kind}")
    ctx = SegmentationContext(data, target.noise_half_width)
    fclass = build_group_indicator_class(groups)
    s = fnr_s(ctx, target.sigma)
    k_p = 1.0 / (2.0 * target.noise_half_width) if target.noise_half_width > 0 else 1.0
    potential = FnrPotential(
        sigma=target.sigma,
        m_bound=target.m_bound,
        noisy_scores=lambda d, _ctx=ctx: _ctx.for_data(d).noisy,
        smoothness=k_p,
        labels=lambda d, _ctx=ctx: _ctx.for_data(d).labels,
    )
    config = GmcConfig(alpha=target.alpha, eta=eta, max_iter=max_iter)
    return run_gmc(
        config,
        s,
        fclass,
        data,
        potential,
        ConstantInit(value=target.f0),
        BoxSpec(lo=-target.m_bound, hi=target.m_bound),
    )


def pixel_accuracy(data: Dataset, trace: PredictorTrace, noise_half_width: float = 0.0) -> float:
    """Pooled fraction of pixels whose thresholded prediction matches the mask."""
    lam = trace.replay_batch(data)[:, 0]
    ctx = SegmentationContext(data, noise_half_width)
    pred = ctx.noisy > lam[:, None]
    return float(np.mean(pred == ctx.labels.astype(bool)))


def conformal_baseline_fnr(calibration: Dataset, target: FnrTarget) -> float:
    """Single global threshold from the inflated empirical FNR risk.

    Scans the breakpoints of the (nondecreasing) risk in ascending order and
    returns the first threshold where n/(n+1) * mean(FNR - sigma) +
    (1-sigma)/(n+1) drops to zero or below; since the risk is nondecreasing
    in lambda this is the interval's left endpoint.
    """
    if len(calibration) == 0:
        raise EmptyCalibration("baseline needs a non-empty calibration fold")
    ctx = SegmentationContext(calibration, target.noise_half_width)
    n = len(calibration)
    pos_scores = ctx.noisy[ctx.labels.astype(bool)]
    candidates = np.concatenate(
        [[-target.m_bound], np.unique(pos_scores), [target.m_bound]]
    )
    for lam in candidates:
        risk = float(np.mean(ctx.fnr_values(np.full(n, lam)))) - target.sigma
        if n / (n + 1.0) * risk + (1.0 - target.sigma) / (n + 1.0) <= 0.0:
            return float(min(max(lam, -target.m_bound), target.m_bound))
    return float(target.m_bound)
