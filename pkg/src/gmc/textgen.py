"""Next-token distribution de-biasing.

Test functions are signed indicators 1{x in A} * v, where A is a prompt
group and v the 0/1 indicator of a set of sensitive tokens. Driving the
residual f(x) - E f(x) below alpha against every such function caps the
group-conditional probability gap for every (group, token set) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyClass, InvariantViolation, NonPositiveGamma
from .potentials import QuadraticPotential
from .projections import SimplexSpec
from .types import (
    KIND_TEXTGEN,
    AuditReport,
    CopyScores,
    Dataset,
    GmcConfig,
    GroupFunction,
    MappingFunctional,
    PredictorTrace,
    Sample,
)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise InvariantViolation("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvariantViolation("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class AttributeSet:
    """A set of sensitive token indices plus its 0/1 indicator vector."""

    u_id: str
    member_indices: frozenset
    vocab_size: int
    indicator: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "member_indices", frozenset(int(i) for i in self.member_indices))
        if any(i < 0 or i >= self.vocab_size for i in self.member_indices):
            raise InvariantViolation(f"attribute set {self.u_id}: index outside vocabulary")
        ind = np.zeros(self.vocab_size)
        for i in self.member_indices:
            ind[i] = 1.0
        ind.setflags(write=False)
        object.__setattr__(self, "indicator", ind)

    def __len__(self):
        return len(self.member_indices)


@dataclass(frozen=True)
class PromptGroup:
    """A deterministic subpopulation predicate over a sample's group bits."""

    a_id: str
    member: Callable[[Sample], bool]

    def mask(self, data: Dataset) -> np.ndarray:
        return np.array([self.member(s) for s in data.samples], dtype=bool)


def group_from_bit(bit: str) -> PromptGroup:
    """Prompt group selecting samples carrying a given group bit."""
    return PromptGroup(a_id=bit, member=lambda s, _b=bit: _b in s.group_bits)


def everyone() -> PromptGroup:
    return PromptGroup(a_id="everyone", member=lambda s: True)


def build_textgen_class(
    groups: Sequence[PromptGroup], attrs: Sequence[AttributeSet]
) -> list[GroupFunction]:
    """Signed indicator functions +-1{x in A} * v for every (A, U) pair.

    g_ids are "+A|U" and "-A|U"; norm bound sqrt(|U|) pointwise.
    """
    if len(groups) == 0 or len(attrs) == 0:
        raise EmptyClass("need at least one group and one attribute set")
    out = []
    for sign, sign_ch in ((1.0, "+"), (-1.0, "-")):
        for a in groups:
            for u in attrs:
                vec = sign * u.indicator

                def batch(values, data, _a=a, _vec=vec):
                    return _a.mask(data)[:, None] * _vec[None, :]

                def single(value, sample, _a=a, _vec=vec):
                    return _vec if _a.member(sample) else np.zeros_like(_vec)

                out.append(
                    GroupFunction(
                        g_id=f"{sign_ch}{a.a_id}|{u.u_id}",
                        out_dim=u.vocab_size,
                        norm_bound=float(np.sqrt(max(len(u), 1))),
                        batch=batch,
                        single=single,
                        description=f"{sign_ch}1[x in {a.a_id}] * indicator({u.u_id})",
                    )
                )
    return out


def textgen_s() -> MappingFunctional:
    """Residual s = f(x) - E f(x); the mean is the shared statistic."""

    def stats(values, data):
        return values.mean(axis=0)

    def batch(values, data, stats):
        return values - stats[None, :]

    return MappingFunctional(
        s_id="centered_distribution",
        out_dim=-1,  # matches the dataset's score dimension
        s_inf_bound=1.0,
        batch=batch,
        stats_pass=stats,
        description="f(x) - mean f",
    )


def bias_gap(trace: PredictorTrace, data: Dataset, a: PromptGroup, u: AttributeSet) -> float:
    """|E[1{x in A} (<v, f(x)> - mean <v, f>)]|, probabilities taken exactly."""
    values = trace.replay_batch(data)
    mass = values @ u.indicator
    centered = mass - mass.mean()
    return float(abs(np.mean(a.mask(data) * centered)))


def conditional_disparity_bound(gap_f: float, gap_m: float, gamma: float) -> float:
    """Certified bound (gap_F + gap_M) / gamma on the two-group probability gap."""
    if gamma <= 0:
        raise NonPositiveGamma(f"gamma must be > 0, got {gamma}")
    return (gap_f + gap_m) / gamma


def calibrate_textgen(
    data: Dataset,
    groups: Sequence[PromptGroup],
    attrs: Sequence[AttributeSet],
    alpha: float,
    eta: float | None = None,
    max_iter: int = 100_000,
) -> tuple[PredictorTrace, AuditReport]:
    """Calibrate next-token distributions so every bias gap is at most alpha."""
    from .core import run_gmc

    if data.kind != KIND_TEXTGEN:
        raise InvariantViolation(f"expected textgen data, got {data.kind}")
    fclass = build_textgen_class(groups, attrs)
    config = GmcConfig(alpha=alpha, eta=eta, max_iter=max_iter)
    return run_gmc(
        config,
        textgen_s(),
        fclass,
        data,
        QuadraticPotential(),
        CopyScores(),
        SimplexSpec(dim=data.score_dim),
    )
