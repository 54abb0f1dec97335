"""Generate the committed baseline-contrast fixture.

A bimodal hierarchy instance on the default 7-node tree where a single
marginal conformal threshold leaves one output event (the node-2 leaf)
with coverage far from the target, while the per-sample calibration loop
drives every event-conditional deviation below alpha:

- Type A (60%): label 0 with a confident correct peak h0 ~ U[0.45, 0.55]
  and near-zero other scores. The nca score sits near 0.5.
- Type B (40%): label 3 but the peak lands on leaf 2 (h2 ~ U[0.55, 0.65],
  h3 ~ U[0.35, 0.45]), so the nca (node 5) score sits near 1.0.

With sigma = 0.8 the marginal quantile lands inside type B's nca score
range; the ~20% of samples above it all output leaf 2 and miss label 3,
concentrating the full miscoverage budget on one event.

Choice of alpha: a sample whose output covers contributes +(1 - sigma)
to its event and one that misses contributes -sigma, so an event can hold
at most alpha/(1 - sigma) covered mass or alpha/sigma missed mass. Type
A's 0.6 mass spreads over its 3-node chain {0, 4, 6} and type B's 0.4
mass, once below its root score, can only move between node 5 (covered)
and node 2 (missed), requiring 0.4 <= alpha/(1 - sigma) + alpha/sigma.
alpha = 0.07 satisfies every cap while 2*alpha stays below the ~0.16
baseline violation.

Run from the repository root:  python3 scripts/make_baseline_contrast_fixture.py
"""

import json
import os

import numpy as np

from gmc.hierarchy import (
    CoverageTarget,
    HierarchyContext,
    LabelTree,
    calibrate_coverage,
    conformal_baseline,
    singleton_events,
)
from gmc.io import emit, save_tree
from gmc.synth import DEFAULT_TREE_LEAVES, DEFAULT_TREE_PARENTS
from gmc.types import Dataset, Sample

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")
N = 1000
SEED = 20240817
SIGMA = 0.8
ALPHA = 0.07
M_BOUND = 1.5
NOISE_W = 0.005


def build_dataset() -> Dataset:
    rng = np.random.default_rng(SEED)
    n_a = int(0.6 * N)
    samples = []
    for i in range(N):
        h = rng.uniform(0.0, 0.03, 4)
        if i < n_a:
            y = 0
            h[0] = rng.uniform(0.45, 0.55)
        else:
            y = 3
            h[2] = rng.uniform(0.55, 0.65)
            h[3] = rng.uniform(0.35, 0.45)
        samples.append(
            Sample(
                sample_id=f"b{i:04d}",
                group_bits=frozenset(),
                scores=h,
                label=y,
                noise_seed=int(rng.integers(2**62)),
            )
        )
    return Dataset(samples, score_dim=4, group_universe=[], kind="hierarchy")


def event_violations_at(ctx, lam, sigma, tree):
    o = ctx.output_nodes(lam)
    resid = ctx.covered(lam) - sigma
    return {
        f"node{v}": float(abs(np.mean((o == v) * resid))) for v in range(tree.n_nodes)
    }


def main():
    os.makedirs(FIXTURE_DIR, exist_ok=True)
    tree = LabelTree(parents=DEFAULT_TREE_PARENTS, n_leaves=DEFAULT_TREE_LEAVES)
    data = build_dataset()
    target = CoverageTarget(
        sigma=SIGMA, alpha=ALPHA, m_bound=M_BOUND, noise_half_width=NOISE_W
    )

    lam_hat = conformal_baseline(data, tree, target)
    ctx = HierarchyContext(tree, data, NOISE_W)
    base = event_violations_at(ctx, np.full(N, lam_hat), SIGMA, tree)
    base_max = max(base.values())

    trace, report = calibrate_coverage(data, tree, target, singleton_events(tree))

    assert base_max > 2 * ALPHA, f"baseline contrast too weak: {base_max}"
    assert report.halted_clean and report.max_violation <= ALPHA, report.max_violation

    emit(data, os.path.join(FIXTURE_DIR, "baseline_contrast.jsonl"))
    save_tree(tree, os.path.join(FIXTURE_DIR, "baseline_contrast_tree.json"))
    expected = {
        "sigma": SIGMA,
        "alpha": ALPHA,
        "m_bound": M_BOUND,
        "noise_half_width": NOISE_W,
        "lambda_hat": lam_hat,
        "baseline_event_violations": base,
        "baseline_max_violation": base_max,
        "gmc_max_violation": report.max_violation,
        "gmc_iterations": report.iterations_used,
    }
    with open(
        os.path.join(FIXTURE_DIR, "baseline_contrast_expected.json"), "w", encoding="utf-8"
    ) as fh:
        json.dump(expected, fh, indent=2)
        fh.write("\n")
    print(json.dumps(expected["baseline_event_violations"], indent=2))
    print(f"lambda_hat={lam_hat} baseline_max={base_max} gmc_max={report.max_violation} "
          f"iters={report.iterations_used}")


if __name__ == "__main__":
    main()
