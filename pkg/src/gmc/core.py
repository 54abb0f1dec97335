"""The calibration loop, its split-data variant, and the closed-form bounds.

The loop repeatedly scans a finite class of test functions for one whose
empirical correlation with the residual exceeds the tolerance, takes a
projected step against it, and halts when no violator remains. Every
accepted step is recorded in the trace so the final predictor can be
replayed anywhere.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientFolds,
    InvalidDelta,
    InvariantViolation,
    NonPositiveAlpha,
    PotentialIncrease,
)
from .potentials import QUADRATIC, Potential, potential_value
from .projections import ProjectionSpec, project
from .types import (
    SPLIT_2T,
    SPLIT_EMPIRICAL,
    AuditReport,
    Dataset,
    GmcConfig,
    GroupFunction,
    InitRule,
    MappingFunctional,
    PredictorTrace,
    Sample,
    TraceStep,
)


def iteration_bound(k_l: float, b: float, c_upper: float, c_lower: float, alpha: float) -> int:
    """Worst-case number of accepted steps: ceil(2 K_L B (C_u - C_l) / alpha^2)."""
    if alpha <= 0:
        raise NonPositiveAlpha(f"alpha must be > 0, got {alpha}")
    if k_l <= 0 or b <= 0:
        raise InvariantViolation("k_l and b must be > 0")
    if c_upper < c_lower:
        raise InvariantViolation("c_upper must be >= c_lower")
    return math.ceil(2.0 * k_l * b * (c_upper - c_lower) / alpha**2)


def sample_complexity(class_size: int, a: float, c2: float, alpha: float, delta: float) -> int:
    """Samples sufficient for uniform convergence over a class of the given size.

    ceil(2 (A C2)^2 / alpha^2 * ln(2 |G| / delta)); natural logarithm.
    """
    if alpha <= 0:
        raise NonPositiveAlpha(f"alpha must be > 0, got {alpha}")
    if not 0 < delta < 1:
        raise InvalidDelta(f"delta must be in (0, 1), got {delta}")
    if class_size < 1:
        raise InvariantViolation("class_size must be >= 1")
    if a <= 0 or c2 <= 0:
        raise InvariantViolation("a and c2 must be > 0")
    return math.ceil(2.0 * (a * c2) ** 2 / alpha**2 * math.log(2.0 * class_size / delta))


def _eval_s_batch(
    s: MappingFunctional,
    values: np.ndarray,
    data: Dataset,
    stats_values: Optional[np.ndarray] = None,
    stats_data: Optional[Dataset] = None,
) -> np.ndarray:
    """Evaluate s on ``data``; shared statistics come from the stats split if given."""
    stats = None
    if s.stats_pass is not None:
        sv = values if stats_values is None else stats_values
        sd = data if stats_data is None else stats_data
        stats = s.stats_pass(sv, sd)
    out = np.asarray(s.batch(values, data, stats), dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    # out_dim <= 0 means "matches whatever the data provides"
    if s.out_dim > 0 and out.shape != (len(data), s.out_dim):
        raise DimensionMismatch(
            f"s {s.s_id!r} returned shape {out.shape}, expected {(len(data), s.out_dim)}"
        )
    return out


def _eval_g_batch(g: GroupFunction, values: np.ndarray, data: Dataset) -> np.ndarray:
    out = np.asarray(g.batch(values, data), dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if out.shape != (len(data), g.out_dim):
        raise DimensionMismatch(
            f"g {g.g_id!r} returned shape {out.shape}, expected {(len(data), g.out_dim)}"
        )
    return out


def _all_violations(
    values: np.ndarray,
    s_vals: np.ndarray,
    fclass: Sequence[GroupFunction],
    data: Dataset,
) -> np.ndarray:
    out = np.empty(len(fclass))
    for i, g in enumerate(fclass):
        gv = _eval_g_batch(g, values, data)
        if gv.shape[1] != s_vals.shape[1]:
            raise DimensionMismatch(
                f"g {g.g_id!r} out_dim {gv.shape[1]} != s out_dim {s_vals.shape[1]}"
            )
        out[i] = np.mean(np.sum(s_vals * gv, axis=1))
    return out


def violation(
    trace: PredictorTrace, g: GroupFunction, s: MappingFunctional, data: Dataset
) -> float:
    """Empirical correlation E[<s(f(x), x), g(f(x), x)>] for one test function."""
    values = trace.replay_batch(data)
    s_vals = _eval_s_batch(s, values, data)
    g_vals = _eval_g_batch(g, values, data)
    return float(np.mean(np.sum(s_vals * g_vals, axis=1)))


def find_violation(
    trace: PredictorTrace,
    fclass: Sequence[GroupFunction],
    s: MappingFunctional,
    data: Dataset,
    threshold: float,
) -> Optional[tuple[str, float]]:
    """First (in sorted g_id order) test function whose violation exceeds the threshold.

    Returns (g_id, violation) or None if every violation is <= threshold.
    Exactly hitting the threshold does not count as a violation.
    """
    if threshold <= 0:
        raise NonPositiveAlpha(f"threshold must be > 0, got {threshold}")
    ordered = sorted(fclass, key=lambda g: g.g_id)
    values = trace.replay_batch(data)
    s_vals = _eval_s_batch(s, values, data)
    for g in ordered:
        gv = _eval_g_batch(g, values, data)
        v = float(np.mean(np.sum(s_vals * gv, axis=1)))
        if v > threshold:
            return (g.g_id, v)
    return None


def _default_eta(config: GmcConfig, potential: Optional[Potential], fclass) -> float:
    if config.eta is not None:
        return config.eta
    if potential is None:
        raise InvariantViolation("eta must be given explicitly when no potential is supplied")
    b = max(g.norm_bound**2 for g in fclass)
    return config.alpha / (potential.smoothness * b)


def _pick_violator(viols: np.ndarray, threshold: float, selection: str) -> Optional[int]:
    over = viols > threshold
    if not over.any():
        return None
    if selection == "max":
        return int(np.argmax(viols))
    return int(np.argmax(over))  # first in sorted order


def run_gmc(
    config: GmcConfig,
    s: MappingFunctional,
    fclass: Sequence[GroupFunction],
    data: Dataset,
    potential: Optional[Potential],
    init: InitRule,
    projection: ProjectionSpec,
) -> tuple[PredictorTrace, AuditReport]:
    """Run the calibration loop on a single dataset until no violator remains.

    Returns the replayable trace plus a report containing the final per-g
    audit (recomputed from the trace), the potential after every accepted
    step, and whether the loop halted cleanly before max_iter. For the
    quadratic potential a step that fails to decrease the potential raises
    ``PotentialIncrease``; the piecewise-linear potentials only decrease in
    expectation over the score noise, so they are recorded, not enforced.
    """
    if config.split_mode != SPLIT_EMPIRICAL:
        raise InvariantViolation("run_gmc requires empirical split mode; use run_gmc_split")
    if len(fclass) == 0:
        raise InvariantViolation("function class must be non-empty")
    ordered = sorted(fclass, key=lambda g: g.g_id)
    if len({g.g_id for g in ordered}) != len(ordered):
        raise InvariantViolation("duplicate g_id in function class")
    eta = _default_eta(config, potential, ordered)

    trace = PredictorTrace(
        init=init, projection=projection, functions={g.g_id: g for g in ordered}
    )
    values = init.batch(data)
    if values.ndim == 1:
        values = values[:, None]

    strict = potential is not None and potential.kind == QUADRATIC
    pot_prev = potential.value_from_values(values, data) if potential is not None else None
    pot_initial = pot_prev
    pot_trace: list[float] = []

    halted_clean = False
    iterations = 0
    for _ in range(config.max_iter):
        s_vals = _eval_s_batch(s, values, data)
        viols = _all_violations(values, s_vals, ordered, data)
        idx = _pick_violator(viols, config.alpha, config.selection)
        if idx is None:
            halted_clean = True
            break
        g = ordered[idx]
        gv = _eval_g_batch(g, values, data)
        values = project(values - eta * gv, projection)
        trace.steps.append(TraceStep(g_id=g.g_id, eta=eta))
        iterations += 1
        if potential is not None:
            pot_new = potential.value_from_values(values, data)
            pot_trace.append(pot_new)
            if strict and pot_new >= pot_prev:
                raise PotentialIncrease(
                    f"step {iterations} on {g.g_id!r}: potential "
                    f"{pot_prev:.17g} -> {pot_new:.17g}"
                )
            pot_prev = pot_new
    else:
        # max_iter exhausted; one final scan decides whether we happen to be clean
        s_vals = _eval_s_batch(s, values, data)
        viols = _all_violations(values, s_vals, ordered, data)
        halted_clean = _pick_violator(viols, config.alpha, config.selection) is None

    # independent final audit from the trace, not the in-loop cache
    final_values = trace.replay_batch(data)
    s_final = _eval_s_batch(s, final_values, data)
    final_viols = _all_violations(final_values, s_final, ordered, data)
    report = AuditReport(
        per_g_violation={g.g_id: float(v) for g, v in zip(ordered, final_viols)},
        max_violation=float(final_viols.max()),
        iterations_used=iterations,
        halted_clean=halted_clean,
        potential_trace=pot_trace,
        potential_initial=pot_initial,
        threshold=config.alpha,
        calibration_values=values,
    )
    return trace, report


def run_gmc_split(
    config: GmcConfig,
    s: MappingFunctional,
    fclass: Sequence[GroupFunction],
    folds: Sequence[Dataset],
    potential: Optional[Potential],
    init: InitRule,
    projection: ProjectionSpec,
) -> tuple[PredictorTrace, AuditReport]:
    """Split-data variant: iteration t checks fold 2t with statistics from fold 2t+1.

    Every iteration consumes a fresh disjoint fold pair, so decisions are
    statistically independent of earlier steps. The violation threshold is
    3/4 alpha. Requires at least 2 * max_iter folds.
    """
    if config.split_mode != SPLIT_2T:
        raise InvariantViolation("run_gmc_split requires split2t mode")
    if len(folds) < 2 * config.max_iter:
        raise InsufficientFolds(
            f"need {2 * config.max_iter} folds for max_iter={config.max_iter}, got {len(folds)}"
        )
    if len(fclass) == 0:
        raise InvariantViolation("function class must be non-empty")
    ordered = sorted(fclass, key=lambda g: g.g_id)
    eta = _default_eta(config, potential, ordered)
    threshold = 0.75 * config.alpha

    trace = PredictorTrace(
        init=init, projection=projection, functions={g.g_id: g for g in ordered}
    )
    halted_clean = False
    iterations = 0
    pot_trace: list[float] = []
    last_viols = None
    last_eval = None
    for t in range(config.max_iter):
        eval_fold, stats_fold = folds[2 * t], folds[2 * t + 1]
        values = trace.replay_batch(eval_fold)
        stats_values = trace.replay_batch(stats_fold)
        s_vals = _eval_s_batch(s, values, eval_fold, stats_values, stats_fold)
        viols = _all_violations(values, s_vals, ordered, eval_fold)
        last_viols, last_eval = viols, eval_fold
        idx = _pick_violator(viols, threshold, config.selection)
        if idx is None:
            halted_clean = True
            break
        trace.steps.append(TraceStep(g_id=ordered[idx].g_id, eta=eta))
        iterations += 1
        if potential is not None:
            pot_trace.append(potential_value(potential, trace, eval_fold))

    if last_viols is None:  # max_iter == 0
        halted_clean = True
        last_viols = np.zeros(len(ordered))
    report = AuditReport(
        per_g_violation={g.g_id: float(v) for g, v in zip(ordered, last_viols)},
        max_violation=float(last_viols.max()),
        iterations_used=iterations,
        halted_clean=halted_clean,
        potential_trace=pot_trace,
        potential_initial=None,
        threshold=threshold,
        calibration_values=None,
    )
    return trace, report


def apply_predictor(trace: PredictorTrace, x: Sample) -> np.ndarray:
    """Replay the trace on one (possibly unseen) sample."""
    return trace.replay_single(x)
