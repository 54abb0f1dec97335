"""Command-line surface: synth, run, audit, bounds.

`run` executes ingest (or synth) -> pre-audit -> calibrate -> post-audit
-> optional baseline, and writes report.json, per_group.csv and trace.json
into the output directory. Exit code 0 means the loop halted cleanly and
the post-audit max violation is within tolerance.

GMC_THREADS is honored as an upper bound on internal parallelism; the
current evaluators are sequential and deterministic, so it is recorded in
the report for provenance and otherwise has no effect.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional

from . import hierarchy as hmod
from . import segmentation as smod
from . import textgen as tmod
from .core import iteration_bound, sample_complexity
from .errors import GmcError, SchemaError
from .io import emit, ingest, load_trace, save_trace
from .synth import SyntheticSpec, synth, synth_attrs
from .types import (
    KIND_HIERARCHY,
    KIND_SEGMENTATION,
    KIND_TEXTGEN,
    Dataset,
    PredictorTrace,
)


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("GMC_THREADS", "0")))
    except ValueError:
        return 0


def _load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise SchemaError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: invalid JSON ({e.msg})") from e


def _app_groups(bits) -> list:
    return [tmod.group_from_bit(b) for b in bits]


def _attrs_from_config(records, vocab_size: int) -> list:
    out = []
    for rec in records:
        out.append(
            tmod.AttributeSet(
                u_id=rec["u_id"],
                member_indices=frozenset(rec["indices"]),
                vocab_size=vocab_size,
            )
        )
    return out


def _build_application(app: dict, data: Dataset):
    """(s, fclass) for auditing a saved trace against a dataset."""
    kind = app["application"]
    if kind == KIND_TEXTGEN:
        attrs = _attrs_from_config(app["attrs"], data.score_dim)
        groups = _app_groups(app["groups"])
        return tmod.textgen_s(), tmod.build_textgen_class(groups, attrs)
    if kind == KIND_HIERARCHY:
        tree = hmod.LabelTree.from_dict(app["tree"])
        ctx = hmod.HierarchyContext(tree, data, app["noise_half_width"])
        events = [
            hmod.EventSet(u_id=e["u_id"], nodes=frozenset(e["nodes"]))
            for e in app["events"]
        ]
        return hmod.coverage_s(ctx, app["sigma"]), hmod.build_event_class(ctx, events)
    if kind == KIND_SEGMENTATION:
        ctx = smod.SegmentationContext(data, app["noise_half_width"])
        groups = _app_groups(app["groups"])
        return smod.fnr_s(ctx, app["sigma"]), smod.build_group_indicator_class(groups)
    raise SchemaError(f"unknown application {kind!r}")


def _audit_values(trace: PredictorTrace, s, fclass, data: Dataset) -> dict:
    from .core import _all_violations, _eval_s_batch

    ordered = sorted(fclass, key=lambda g: g.g_id)
    values = trace.replay_batch(data)
    s_vals = _eval_s_batch(s, values, data)
    viols = _all_violations(values, s_vals, ordered, data)
    return {g.g_id: float(v) for g, v in zip(ordered, viols)}


def _write_reports(out_dir: str, report: dict, pre: dict, post: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "per_group.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["g_id", "pre_violation", "post_violation"])
        for g_id in sorted(pre):
            w.writerow([g_id, format(pre[g_id], ".17g"), format(post[g_id], ".17g")])


def _cmd_synth(args) -> int:
    spec = SyntheticSpec.from_dict(_load_json(args.spec))
    emit(synth(spec), args.out)
    print(json.dumps({"written": args.out, "n_samples": spec.n_samples}))
    return 0


def _cmd_bounds(args) -> int:
    b = args.a**2
    out = {
        "iteration_bound": iteration_bound(args.k_l, b, args.c_upper, args.c_lower, args.alpha),
        "sample_complexity": sample_complexity(
            args.class_size, args.a, args.c2, args.alpha, args.delta
        ),
    }
    print(json.dumps(out))
    return 0


def _cmd_audit(args) -> int:
    trace, app = load_trace(args.trace)
    if not app:
        raise SchemaError(f"{args.trace}: trace lacks the application record needed to audit")
    data = ingest(args.data, app["application"])
    s, fclass = _build_application(app, data)
    trace.functions = {g.g_id: g for g in fclass}
    per_g = _audit_values(trace, s, fclass, data)
    max_v = max(per_g.values())
    alpha = app.get("alpha")
    out = {"per_g_violation": per_g, "max_violation": max_v, "alpha": alpha}
    print(json.dumps(out, indent=2))
    return 0 if alpha is None or max_v <= alpha else 1


def _run_textgen(cfg: dict, data: Dataset):
    if "attrs" in cfg:
        attrs = _attrs_from_config(cfg["attrs"], data.score_dim)
    elif "synth" in cfg:
        attrs = synth_attrs(
            SyntheticSpec.from_dict(dict(cfg["synth"], application=KIND_TEXTGEN))
        )
    else:
        raise SchemaError("textgen run needs 'attrs' (or a synth spec providing them)")
    groups = _app_groups(cfg.get("groups", data.group_universe))
    trace, report = tmod.calibrate_textgen(
        data,
        groups,
        attrs,
        alpha=cfg["alpha"],
        eta=cfg.get("eta"),
        max_iter=cfg.get("max_iter", 100_000),
    )
    app = {
        "application": KIND_TEXTGEN,
        "alpha": cfg["alpha"],
        "groups": [g.a_id for g in groups],
        "attrs": [{"u_id": u.u_id, "indices": sorted(u.member_indices)} for u in attrs],
    }
    return trace, report, app, None


def _run_hierarchy(cfg: dict, data: Dataset):
    tree = hmod.LabelTree.from_dict(cfg["tree"])
    target = hmod.CoverageTarget(
        sigma=cfg["sigma"],
        alpha=cfg["alpha"],
        m_bound=cfg["m_bound"],
        noise_half_width=cfg.get("noise_half_width", 0.0),
    )
    if cfg.get("events", "singletons") == "singletons":
        events = hmod.singleton_events(tree)
    else:
        events = [
            hmod.EventSet(u_id=e["u_id"], nodes=frozenset(e["nodes"]))
            for e in cfg["events"]
        ]
    trace, report = hmod.calibrate_coverage(
        data, tree, target, events, eta=cfg.get("eta"), max_iter=cfg.get("max_iter", 200_000)
    )
    app = {
        "application": KIND_HIERARCHY,
        "alpha": target.alpha,
        "sigma": target.sigma,
        "m_bound": target.m_bound,
        "noise_half_width": target.noise_half_width,
        "tree": tree.to_dict(),
        "events": [{"u_id": e.u_id, "nodes": sorted(e.nodes)} for e in events],
    }
    baseline = None
    if cfg.get("baseline"):
        baseline = {"lambda_hat": hmod.conformal_baseline(data, tree, target)}
    return trace, report, app, baseline


def _run_segmentation(cfg: dict, data: Dataset):
    target = smod.FnrTarget(
        sigma=cfg["sigma"],
        alpha=cfg["alpha"],
        m_bound=cfg["m_bound"],
        f0=cfg["f0"],
        noise_half_width=cfg.get("noise_half_width", 0.0),
    )
    groups = _app_groups(cfg.get("groups", data.group_universe))
    trace, report = smod.calibrate_fnr(
        data, target, groups, eta=cfg.get("eta"), max_iter=cfg.get("max_iter", 200_000)
    )
    app = {
        "application": KIND_SEGMENTATION,
        "alpha": target.alpha,
        "sigma": target.sigma,
        "m_bound": target.m_bound,
        "f0": target.f0,
        "noise_half_width": target.noise_half_width,
        "groups": [g.a_id for g in groups],
    }
    baseline = None
    if cfg.get("baseline"):
        baseline = {"lambda_hat": smod.conformal_baseline_fnr(data, target)}
    return trace, report, app, baseline


def _cmd_run(args) -> int:
    cfg = _load_json(args.config)
    kind = cfg["application"]
    if kind not in (KIND_TEXTGEN, KIND_HIERARCHY, KIND_SEGMENTATION):
        raise SchemaError(f"unknown application {kind!r}")
    if "data" in cfg:
        data = ingest(cfg["data"], kind)
    elif "synth" in cfg:
        data = synth(SyntheticSpec.from_dict(dict(cfg["synth"], application=kind)))
    else:
        raise SchemaError("config needs 'data' (path) or 'synth' (spec)")

    runner = {
        KIND_TEXTGEN: _run_textgen,
        KIND_HIERARCHY: _run_hierarchy,
        KIND_SEGMENTATION: _run_segmentation,
    }[kind]
    trace, report, app, baseline = runner(cfg, data)

    s, fclass = _build_application(app, data)
    pre_trace = PredictorTrace(
        init=trace.init, projection=trace.projection, steps=[], functions=trace.functions
    )
    pre = _audit_values(pre_trace, s, fclass, data)
    post = report.per_g_violation

    out_dir = cfg.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    save_trace(trace, os.path.join(out_dir, "trace.json"), extra=app)
    full = {
        "application": kind,
        "alpha": cfg["alpha"],
        "gmc_threads": _threads(),
        "pre_audit": {"per_g_violation": pre, "max_violation": max(pre.values())},
        "post_audit": report.to_dict(),
        "baseline": baseline,
    }
    _write_reports(out_dir, full, pre, post)
    ok = report.halted_clean and report.max_violation <= cfg["alpha"]
    print(
        json.dumps(
            {
                "halted_clean": report.halted_clean,
                "iterations_used": report.iterations_used,
                "max_violation": report.max_violation,
                "out_dir": out_dir,
            }
        )
    )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--spec", required=True)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=_cmd_synth)

    pr = sub.add_parser("run", help="ingest/synth, calibrate, audit, report")
    pr.add_argument("--config", required=True)
    pr.set_defaults(func=_cmd_run)

    pa = sub.add_parser("audit", help="re-audit a saved trace against a dataset")
    pa.add_argument("--data", required=True)
    pa.add_argument("--trace", required=True)
    pa.set_defaults(func=_cmd_audit)

    pb = sub.add_parser("bounds", help="print iteration and sample-size bounds")
    pb.add_argument("--class-size", type=int, required=True)
    pb.add_argument("--alpha", type=float, required=True)
    pb.add_argument("--delta", type=float, required=True)
    pb.add_argument("--a", type=float, required=True, help="pointwise norm bound A")
    pb.add_argument("--c2", type=float, required=True, help="residual bound C2")
    pb.add_argument("--k-l", type=float, default=1.0, help="potential smoothness")
    pb.add_argument("--c-upper", type=float, default=1.0)
    pb.add_argument("--c-lower", type=float, default=0.0)
    pb.set_defaults(func=_cmd_bounds)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GmcError as e:
        print(
            json.dumps({"error": type(e).__name__, "message": str(e)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
