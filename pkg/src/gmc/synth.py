"""Seeded synthetic instance generators with planted group disparities.

Each generator is calibrated so the pre-calibration audit of its instance
exhibits a known violation level: the textgen generator plants an exact
attribute-mass gap between groups, the hierarchy generator mixes confident
and confused score vectors on a small tree, and the segmentation generator
shifts pixel scores per group so a single global threshold cannot hit the
FNR target for every group at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec
from .hierarchy import LabelTree
from .textgen import AttributeSet, PromptGroup, group_from_bit
from .types import (
    KIND_HIERARCHY,
    KIND_SEGMENTATION,
    KIND_TEXTGEN,
    Dataset,
    Sample,
)

# the 7-node demonstration shape: 4 leaves, two internal parents, one root
DEFAULT_TREE_PARENTS = (4, 4, 5, 5, 6, 6, 6)
DEFAULT_TREE_LEAVES = 4


@dataclass(frozen=True)
class SyntheticSpec:
    application: str
    n_samples: int
    seed: int = 0
    disparity: float = 0.0
    vocab_size: int = 50
    n_groups: int = 2
    n_attr_sets: int = 3
    max_attr_size: int = 5
    tree_parents: tuple = DEFAULT_TREE_PARENTS
    tree_leaves: int = DEFAULT_TREE_LEAVES
    pixels: int = 64
    confusion: float = 0.2  # hierarchy: chance the top score lands off-label

    def __post_init__(self):
        if self.application not in (KIND_TEXTGEN, KIND_HIERARCHY, KIND_SEGMENTATION):
            raise InvalidSpec(f"unknown application {self.application!r}")
        if self.n_samples < 1:
            raise InvalidSpec("n_samples must be >= 1")
        if self.disparity < 0:
            raise InvalidSpec("disparity must be >= 0")
        if self.vocab_size < 2:
            raise InvalidSpec("vocab_size must be >= 2")
        if len(self.tree_parents) < 3:
            raise InvalidSpec("tree needs >= 3 nodes")
        if self.pixels < 1:
            raise InvalidSpec("pixels must be >= 1")
        if self.n_groups < 1 or self.n_attr_sets < 1 or self.max_attr_size < 1:
            raise InvalidSpec("group/attribute counts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        import dataclasses

        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown spec fields {sorted(extra)}")
        if "tree_parents" in d:
            d = dict(d, tree_parents=tuple(d["tree_parents"]))
        return cls(**d)


def synth_groups(spec: SyntheticSpec) -> list[PromptGroup]:
    return [group_from_bit(f"a{k}") for k in range(spec.n_groups)]


def synth_attrs(spec: SyntheticSpec) -> list[AttributeSet]:
    """Disjoint attribute sets of sizes max, max-2, ... (floored at 1)."""
    attrs, start = [], 0
    for j in range(spec.n_attr_sets):
        size = max(1, spec.max_attr_size - 2 * j)
        if start + size > spec.vocab_size:
            raise InvalidSpec("attribute sets exceed the vocabulary")
        attrs.append(
            AttributeSet(
                u_id=f"u{j}",
                member_indices=frozenset(range(start, start + size)),
                vocab_size=spec.vocab_size,
            )
        )
        start += size
    return attrs


def synth_tree(spec: SyntheticSpec) -> LabelTree:
    return LabelTree(parents=spec.tree_parents, n_leaves=spec.tree_leaves)


def _rescale_mass(p: np.ndarray, members: np.ndarray, target: float) -> np.ndarray:
    """Scale p so the members' total mass equals target, preserving shape."""
    inside = p[members].sum()
    out = p.copy()
    out[members] *= target / inside
    out[~members] *= (1.0 - target) / (1.0 - inside)
    return out


def synth_textgen(spec: SyntheticSpec) -> Dataset:
    """Planted attribute-mass gap: group a0 carries extra mass on u0.

    Group assignment alternates deterministically, and the u0 mass is set
    exactly per group, so the pre-calibration violation for (a0, u0) equals
    the disparity up to the float arithmetic of the rescaling.
    """
    rng = np.random.default_rng(spec.seed)
    attrs = synth_attrs(spec)
    members0 = attrs[0].indicator.astype(bool)
    mu = 0.5
    g = spec.n_groups
    n = spec.n_samples
    d = g * spec.disparity
    if mu + d > 0.98 or mu - d / max(g - 1, 1) < 0.02:
        raise InvalidSpec(f"disparity {spec.disparity} too large for the planted mass")
    ks = np.arange(n) % g
    targets = np.where(ks == 0, mu + d, mu - d / max(g - 1, 1))
    p = rng.dirichlet(np.ones(spec.vocab_size), size=n)
    inside = p[:, members0].sum(axis=1)
    p[:, members0] *= (targets / inside)[:, None]
    p[:, ~members0] *= ((1.0 - targets) / (1.0 - inside))[:, None]
    cdf = np.cumsum(p, axis=1)
    draws = rng.random(n) * cdf[:, -1]
    labels = (cdf < draws[:, None]).sum(axis=1)
    seeds = rng.integers(2**62, size=n)
    bits = [frozenset({f"a{k}"}) for k in range(g)]
    samples = [
        Sample(
            sample_id=f"t{i:06d}",
            group_bits=bits[ks[i]],
            scores=p[i],
            label=int(labels[i]),
            noise_seed=int(seeds[i]),
        )
        for i in range(n)
    ]
    return Dataset(
        samples,
        score_dim=spec.vocab_size,
        group_universe=[f"a{k}" for k in range(g)],
        kind=KIND_TEXTGEN,
    )


def synth_hierarchy(spec: SyntheticSpec) -> Dataset:
    """Leaf scores peaked on the label, occasionally on a wrong leaf.

    Off-label scores are uniform on [0, 0.2] and the peaked score on
    [0.4, 0.8], so every cumulative score (root included) stays within
    [0, 1.4] before noise.
    """
    rng = np.random.default_rng(spec.seed)
    tree = synth_tree(spec)
    k = tree.n_leaves
    n = spec.n_samples
    y = rng.integers(k, size=n)
    confused = rng.random(n) < spec.confusion
    peak = np.where(confused, rng.integers(k, size=n), y)
    h = rng.uniform(0.0, 0.2, (n, k))
    h[np.arange(n), peak] = rng.uniform(0.4, 0.8, n)
    seeds = rng.integers(2**62, size=n)
    empty = frozenset()
    samples = [
        Sample(
            sample_id=f"h{i:06d}",
            group_bits=empty,
            scores=h[i],
            label=int(y[i]),
            noise_seed=int(seeds[i]),
        )
        for i in range(n)
    ]
    return Dataset(samples, score_dim=k, group_universe=[], kind=KIND_HIERARCHY)


def synth_segmentation(spec: SyntheticSpec, shift_scale: float = 1.0) -> Dataset:
    """Pixel scores separated by label with a planted per-group shift.

    Positive pixels score around +0.7, negative around -0.7, both with
    Gaussian spread; each of the groups gets a constant additive shift in
    [-0.3, 0.3] * shift_scale, so the FNR at any single global threshold
    differs across groups.
    """
    rng = np.random.default_rng(spec.seed)
    g = spec.n_groups
    n = spec.n_samples
    shifts = (np.linspace(-0.3, 0.3, g) if g > 1 else np.zeros(1)) * shift_scale
    ks = np.arange(n) % g
    y = (rng.random((n, spec.pixels)) < 0.5).astype(np.float64)
    bad = np.nonzero(y.sum(axis=1) == 0)[0]
    while bad.size:
        y[bad] = (rng.random((bad.size, spec.pixels)) < 0.5).astype(np.float64)
        bad = bad[y[bad].sum(axis=1) == 0]
    h = (y - 0.5) * 1.4 + shifts[ks][:, None] + rng.normal(0.0, 0.3, (n, spec.pixels))
    h = np.clip(h, -1.9, 1.9)
    seeds = rng.integers(2**62, size=n)
    bits = [frozenset({f"a{k}"}) for k in range(g)]
    samples = [
        Sample(
            sample_id=f"s{i:06d}",
            group_bits=bits[ks[i]],
            scores=h[i],
            label=y[i].astype(int),
            noise_seed=int(seeds[i]),
        )
        for i in range(n)
    ]
    return Dataset(
        samples,
        score_dim=spec.pixels,
        group_universe=[f"a{k}" for k in range(g)],
        kind=KIND_SEGMENTATION,
    )


def synth(spec: SyntheticSpec) -> Dataset:
    """Dispatch on the spec's application kind."""
    if spec.application == KIND_TEXTGEN:
        return synth_textgen(spec)
    if spec.application == KIND_HIERARCHY:
        return synth_hierarchy(spec)
    return synth_segmentation(spec)
