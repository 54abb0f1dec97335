"""Prediction sets on label trees with set-conditional coverage control.

Scores live on the leaves; each internal node accumulates the scores of the
leaves below it, plus seeded uniform noise to break ties. The prediction at
threshold lambda is the shallowest ancestor of the top leaf whose noisy
cumulative score stays below lambda (root if none does). Calibration drives
the coverage rate, conditioned on each output event, to the target.

Nodes are integers 0..|V|-1 with leaves 0..K-1; the root is self-parented.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyCalibration,
    EmptyClass,
    InvariantViolation,
    UnknownNode,
)
from .potentials import CoveragePotential
from .projections import BoxSpec
from .types import (
    KIND_HIERARCHY,
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


class LabelTree:
    """A rooted tree over nodes 0..|V|-1 whose first K nodes are the leaves."""

    def __init__(self, parents: Sequence[int], n_leaves: int):
        parents = [int(p) for p in parents]
        n = len(parents)
        if not 1 <= n_leaves <= n:
            raise InvariantViolation(f"need 1 <= leaves <= nodes, got {n_leaves}/{n}")
        roots = [v for v in range(n) if parents[v] == v]
        if len(roots) != 1:
            raise InvariantViolation(f"expected exactly one self-parented root, got {roots}")
        self.parents = tuple(parents)
        self.n_nodes = n
        self.n_leaves = int(n_leaves)
        self.root = roots[0]

        self.depth_of = [-1] * n
        self.depth_of[self.root] = 0
        for v in range(n):
            chain, node = [], v
            while self.depth_of[node] < 0:
                chain.append(node)
                node = parents[node]
                if len(chain) > n:
                    raise InvariantViolation(f"node {v} does not reach the root")
            d = self.depth_of[node]
            for u in reversed(chain):
                d += 1
                self.depth_of[u] = d
        self.depth = max(self.depth_of)

        children = [[] for _ in range(n)]
        for v in range(n):
            if v != self.root:
                children[parents[v]].append(v)
        for v in range(self.n_leaves):
            if children[v]:
                raise InvariantViolation(f"leaf {v} has children {children[v]}")
        for v in range(self.n_leaves, n):
            if not children[v] and v != self.root:
                raise InvariantViolation(f"internal node {v} has no children")

        self._chains = [self._build_chain(v) for v in range(n)]
        # is_ancestor[a, v]: a lies on v's root path (ancestor-or-self)
        self.is_ancestor = np.zeros((n, n), dtype=bool)
        for v in range(n):
            self.is_ancestor[self._chains[v], v] = True
        # leaves_under[v, j]: leaf j sits below (or is) node v
        self.leaves_under = self.is_ancestor[:, : self.n_leaves]

    def _build_chain(self, v: int) -> list[int]:
        chain = [v]
        while chain[-1] != self.root:
            chain.append(self.parents[chain[-1]])
        return chain

    def _check_node(self, v: int):
        if not 0 <= v < self.n_nodes:
            raise UnknownNode(f"node {v} outside 0..{self.n_nodes - 1}")

    def ancestors(self, v: int) -> list[int]:
        """Root path of v, self first: [v, parent(v), ..., root]."""
        self._check_node(v)
        return list(self._chains[v])

    def nca(self, i: int, j: int) -> int:
        """Deepest node lying on both root paths."""
        self._check_node(i)
        self._check_node(j)
        on_j = set(self._chains[j])
        for v in self._chains[i]:
            if v in on_j:
                return v
        return self.root

    def to_dict(self) -> dict:
        return {"parents": list(self.parents), "leaves": self.n_leaves}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTree":
        return cls(parents=d["parents"], n_leaves=d["leaves"])


@dataclass(frozen=True)
class EventSet:
    """A nonempty set of output nodes defining one conditioning event."""

    u_id: str
    nodes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(int(v) for v in self.nodes))
        if len(self.nodes) == 0:
            raise InvariantViolation(f"event {self.u_id}: empty node set")


@dataclass(frozen=True)
class CoverageTarget:
    sigma: float
    alpha: float
    m_bound: float
    noise_half_width: float = 0.0

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise InvariantViolation(f"sigma must be in (0,1), got {self.sigma}")
        if self.alpha <= 0:
            raise InvariantViolation(f"alpha must be > 0, got {self.alpha}")
        if self.m_bound <= 0:
            raise InvariantViolation(f"M must be > 0, got {self.m_bound}")
        if self.noise_half_width < 0:
            raise InvariantViolation("noise_half_width must be >= 0")


def cumulative_scores(
    tree: LabelTree, sample: Sample, noise_half_width: float = 0.0
) -> np.ndarray:
    """Noisy cumulative score r_v = sum of leaf scores under v + seeded noise."""
    if sample.scores.shape != (tree.n_leaves,):
        raise DimensionMismatch(
            f"sample {sample.sample_id}: {sample.scores.shape[0]} scores, "
            f"{tree.n_leaves} leaves"
        )
    base = tree.leaves_under @ sample.scores
    return base + noise_uniform(sample.noise_seed, noise_half_width, tree.n_nodes)


def output_node(tree: LabelTree, r: np.ndarray, u: int, lam: float) -> int:
    """Shallowest ancestor-or-self of leaf u with r below lambda; root if none."""
    for v in reversed(tree.ancestors(u)):  # root end first
        if r[v] < lam:
            return v
    return tree.root


def covers(tree: LabelTree, o: int, y: int) -> bool:
    """True iff the subtree at o contains leaf y (o on y's root path)."""
    tree._check_node(o)
    tree._check_node(y)
    return bool(tree.is_ancestor[o, y])


def top_leaf(scores: np.ndarray) -> int:
    """Argmax leaf, ties to the lowest index."""
    return int(np.argmax(scores))


def coverage_identity_check(
    tree: LabelTree, sample: Sample, lam: float, noise_half_width: float = 0.0
) -> bool:
    """Whether 1{r at nca(y, u) < lambda} agrees with covers(output_node, y)."""
    r = cumulative_scores(tree, sample, noise_half_width)
    u = top_leaf(sample.scores)
    y = int(sample.label)
    lhs = bool(r[tree.nca(y, u)] < lam)
    rhs = covers(tree, output_node(tree, r, u, lam), y)
    return lhs == rhs


class HierarchyContext:
    """Per-dataset caches: noisy cumulative scores, top leaves, output nodes.

    Output nodes are memoized on the identity of the threshold array, since
    within one loop iteration every test function sees the same values.
    """

    def __init__(self, tree: LabelTree, data: Dataset, noise_half_width: float):
        self.tree = tree
        self.data = data
        self.noise_half_width = float(noise_half_width)
        self.r = np.stack(
            [cumulative_scores(tree, s, noise_half_width) for s in data.samples]
        )
        self.u = np.array([top_leaf(s.scores) for s in data.samples])
        self.y = data.labels_int()
        if self.y.min() < 0 or self.y.max() >= tree.n_leaves:
            raise InvariantViolation("labels must be leaf indices")
        # per-sample root path of the top leaf, root end first, padded at the
        # deep end with a sentinel whose score is +inf (never qualifies)
        h = tree.depth + 1
        n = len(data)
        self._chain_r = np.full((n, h), np.inf)
        self._chain_id = np.full((n, h), tree.root, dtype=int)
        for i in range(n):
            chain = list(reversed(tree.ancestors(int(self.u[i]))))
            self._chain_id[i, : len(chain)] = chain
            self._chain_r[i, : len(chain)] = self.r[i, chain]
        self._memo_key: Optional[np.ndarray] = None
        self._memo_out: Optional[np.ndarray] = None
        self._rq: Optional[np.ndarray] = None
        self._derived: dict = {}

    def for_data(self, data: Dataset) -> "HierarchyContext":
        """Context for another dataset (same tree and noise), cached by identity."""
        if data is self.data:
            return self
        ctx = self._derived.get(id(data))
        if ctx is None or ctx.data is not data:
            ctx = HierarchyContext(self.tree, data, self.noise_half_width)
            self._derived[id(data)] = ctx
        return ctx

    def rq(self, data: Optional[Dataset] = None) -> np.ndarray:
        """Noisy score at nca(label, top leaf) per sample; the coverage kink."""
        if data is not None and data is not self.data:
            return self.for_data(data).rq()
        if self._rq is None:
            idx = np.array(
                [self.tree.nca(int(yy), int(uu)) for yy, uu in zip(self.y, self.u)]
            )
            self._rq = self.r[np.arange(len(self.data)), idx]
        return self._rq

    def chain_floor(self) -> np.ndarray:
        """Per-sample minimum noisy score on the top leaf's root path.

        Thresholds at or below it put the output rule in its root-fallback
        regime, where the coverage potential's slope no longer matches the
        coverage residual."""
        return np.min(self._chain_r, axis=1, initial=np.inf, where=np.isfinite(self._chain_r))

    def output_nodes(self, lam: np.ndarray) -> np.ndarray:
        if self._memo_key is lam:
            return self._memo_out
        qual = self._chain_r < lam[:, None]
        first = np.argmax(qual, axis=1)
        out = self._chain_id[np.arange(len(lam)), first]
        out = np.where(qual.any(axis=1), out, self.tree.root)
        self._memo_key, self._memo_out = lam, out
        return out

    def covered(self, lam: np.ndarray) -> np.ndarray:
        o = self.output_nodes(lam)
        return self.tree.is_ancestor[o, self.y].astype(np.float64)

    def sample_state(self, sample: Sample) -> tuple[np.ndarray, int]:
        r = cumulative_scores(self.tree, sample, self.noise_half_width)
        return r, top_leaf(sample.scores)


def coverage_s(ctx: HierarchyContext, sigma: float) -> MappingFunctional:
    """Residual 1{output covers label} - sigma, the coverage potential's slope."""

    def batch(values, data, stats):
        return (ctx.for_data(data).covered(values[:, 0]) - sigma)[:, None]

    return MappingFunctional(
        s_id="coverage_residual",
        out_dim=1,
        s_inf_bound=1.0,
        batch=batch,
        description="1{covers} - sigma",
    )


def build_event_class(
    ctx: HierarchyContext, events: Sequence[EventSet]
) -> list[GroupFunction]:
    """Signed indicators +-1{output_node in U} for each event set U."""
    if len(events) == 0:
        raise EmptyClass("need at least one event set")
    tree = ctx.tree
    out = []
    for sign, sign_ch in ((1.0, "+"), (-1.0, "-")):
        for ev in events:
            for v in ev.nodes:
                tree._check_node(v)
            memb = np.zeros(tree.n_nodes)
            memb[list(ev.nodes)] = 1.0

            def batch(values, data, _memb=memb, _sign=sign):
                o = ctx.for_data(data).output_nodes(values[:, 0])
                return (_sign * _memb[o])[:, None]

            def single(value, sample, _memb=memb, _sign=sign):
                r, u = ctx.sample_state(sample)
                o = output_node(tree, r, u, float(value[0]))
                return np.array([_sign * _memb[o]])

            out.append(
                GroupFunction(
                    g_id=f"{sign_ch}{ev.u_id}",
                    out_dim=1,
                    norm_bound=1.0,
                    batch=batch,
                    single=single,
                    description=f"{sign_ch}1[output in {ev.u_id}]",
                )
            )
    return out


def singleton_events(tree: LabelTree) -> list[EventSet]:
    """One event per node: conditioning on each possible output."""
    return [EventSet(u_id=f"node{v}", nodes=frozenset({v})) for v in range(tree.n_nodes)]


def calibrate_coverage(
    data: Dataset,
    tree: LabelTree,
    target: CoverageTarget,
    events: Sequence[EventSet],
    eta: Optional[float] = None,
    max_iter: int = 200_000,
) -> tuple[PredictorTrace, AuditReport]:
    """Per-sample threshold calibration for event-conditional coverage.

    The potential is sigma' * lambda - min(lambda, r_q) with sigma' = 1 -
    target coverage, whose slope between kinks is exactly the coverage
    residual paired below; its range gives C_u = (sigma'+1)M from the
    constant-M initializer and C_l = (sigma'-1)M.
    """
    from .core import run_gmc

    if data.kind != KIND_HIERARCHY:
        raise InvariantViolation(f"expected hierarchy data, got {data.kind}")
    ctx = HierarchyContext(tree, data, target.noise_half_width)
    fclass = build_event_class(ctx, events)
    s = coverage_s(ctx, target.sigma)
    k_p = 1.0 / (2.0 * target.noise_half_width) if target.noise_half_width > 0 else 1.0
    potential = CoveragePotential(
        sigma=1.0 - target.sigma,
        m_bound=target.m_bound,
        rq_values=lambda d, _ctx=ctx: _ctx.rq(d),
        smoothness=k_p,
        fallback_floor=lambda d, _ctx=ctx: _ctx.for_data(d).chain_floor(),
    )
    config = GmcConfig(alpha=target.alpha, eta=eta, max_iter=max_iter)
    return run_gmc(
        config,
        s,
        fclass,
        data,
        potential,
        ConstantInit(value=target.m_bound),
        BoxSpec(lo=-target.m_bound, hi=target.m_bound),
    )


def conformal_baseline(calibration: Dataset, tree: LabelTree, target: CoverageTarget) -> float:
    """Single split-conformal threshold controlling marginal coverage.

    Scans the finite breakpoints of the empirical risk (the sorted noisy
    scores at nca(label, top leaf)) for the smallest threshold at which the
    inflated empirical risk of the centered coverage loss drops to zero,
    clamped to [-M, M]. Equals the classic conformal quantile at rank
    ceil(sigma * (n+1)).
    """
    if len(calibration) == 0:
        raise EmptyCalibration("baseline needs a non-empty calibration fold")
    ctx = HierarchyContext(tree, calibration, target.noise_half_width)
    rq = np.sort(ctx.rq(calibration))
    n = len(rq)
    m = target.m_bound
    for lam in rq:
        # risk just above the breakpoint: count of rq <= lam covered
        c = int(np.searchsorted(rq, lam, side="right"))
        if target.sigma - c / (n + 1.0) <= 0.0:
            return float(min(max(lam, -m), m))
    return float(m)
