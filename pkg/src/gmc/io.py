"""File formats: JSON-lines datasets, tree files, trace files.

Datasets are one sample per line: {"id", "groups": [str], "scores":
[float], "label": int | [0/1 ints], "seed": int}. An optional first line
{"_meta": {"kind", "score_dim", "group_universe"}} pins the dataset-level
fields so a round trip reproduces them exactly; without it they are
inferred. Floats are written with 17 significant digits so every value
round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .errors import InvariantViolation, SchemaError
from .hierarchy import LabelTree
from .types import (
    KIND_SEGMENTATION,
    KIND_TEXTGEN,
    KINDS,
    Dataset,
    PredictorTrace,
    Sample,
    init_rule_from_dict,
    projection_from_dict,
)

_DIST_TOL = 1e-6


def _f17(x: float) -> str:
    return format(float(x), ".17g")


def _sample_line(s: Sample) -> str:
    scores = "[" + ",".join(_f17(v) for v in s.scores) + "]"
    if np.ndim(s.label) == 0:
        label = str(int(s.label))
    else:
        label = "[" + ",".join(str(int(b)) for b in np.asarray(s.label)) + "]"
    groups = json.dumps(sorted(s.group_bits))
    return (
        f'{{"id":{json.dumps(s.sample_id)},"groups":{groups},'
        f'"scores":{scores},"label":{label},"seed":{int(s.noise_seed)}}}'
    )


def emit(data: Dataset, path: str) -> None:
    meta = {
        "_meta": {
            "kind": data.kind,
            "score_dim": data.score_dim,
            "group_universe": list(data.group_universe),
        }
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta) + "\n")
        for s in data.samples:
            fh.write(_sample_line(s) + "\n")


def _require(cond: bool, lineno: int, msg: str):
    if not cond:
        raise SchemaError(f"line {lineno}: {msg}")


def ingest(path: str, kind: str) -> Dataset:
    """Read a JSONL dataset, validating per-kind invariants with line diagnostics."""
    if kind not in KINDS:
        raise SchemaError(f"unknown dataset kind {kind!r}")
    if not os.path.exists(path):
        raise SchemaError(f"no such file: {path}")
    samples = []
    meta: Optional[dict] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if "_meta" in rec:
                _require(lineno == 1, lineno, "_meta allowed only on the first line")
                meta = rec["_meta"]
                continue
            for fieldname in ("id", "groups", "scores", "label"):
                _require(fieldname in rec, lineno, f"missing field {fieldname!r}")
            _require(isinstance(rec["id"], str), lineno, "id must be a string")
            _require(
                isinstance(rec["groups"], list)
                and all(isinstance(g, str) for g in rec["groups"]),
                lineno,
                "groups must be a list of strings",
            )
            scores = rec["scores"]
            _require(
                isinstance(scores, list) and all(isinstance(v, (int, float)) for v in scores),
                lineno,
                "scores must be a list of numbers",
            )
            scores = np.asarray(scores, dtype=np.float64)
            _require(bool(np.all(np.isfinite(scores))), lineno, "scores must be finite")
            label = rec["label"]
            if kind == KIND_SEGMENTATION:
                _require(
                    isinstance(label, list) and all(b in (0, 1) for b in label),
                    lineno,
                    "segmentation label must be a list of 0/1",
                )
                _require(
                    len(label) == len(scores), lineno, "label length must match scores"
                )
                if sum(label) == 0:
                    raise InvariantViolation(
                        f"line {lineno}: sample {rec['id']!r} has no positive pixels"
                    )
                label = np.asarray(label, dtype=int)
            else:
                _require(isinstance(label, int), lineno, "label must be an integer")
                if kind == KIND_TEXTGEN:
                    _require(0 <= label < len(scores), lineno, "label outside vocabulary")
            if kind == KIND_TEXTGEN:
                total = float(scores.sum())
                _require(
                    abs(total - 1.0) <= _DIST_TOL and bool(np.all(scores >= 0)),
                    lineno,
                    f"row {rec['id']!r} is not a distribution (sum {total:.6g})",
                )
            samples.append(
                Sample(
                    sample_id=rec["id"],
                    group_bits=frozenset(rec["groups"]),
                    scores=scores,
                    label=label,
                    noise_seed=int(rec.get("seed", 0)),
                )
            )
    if not samples:
        raise SchemaError(f"{path}: no samples")
    if meta is not None:
        if meta.get("kind", kind) != kind:
            raise SchemaError(f"file declares kind {meta['kind']!r}, requested {kind!r}")
        score_dim = int(meta["score_dim"])
        universe = list(meta["group_universe"])
    else:
        score_dim = samples[0].scores.shape[0]
        universe = sorted(set().union(*[s.group_bits for s in samples]))
    return Dataset(samples, score_dim=score_dim, group_universe=universe, kind=kind)


def save_tree(tree: LabelTree, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree.to_dict(), fh)
        fh.write("\n")


def load_tree(path: str) -> LabelTree:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    for fieldname in ("parents", "leaves"):
        if fieldname not in d:
            raise SchemaError(f"tree file missing {fieldname!r}")
    return LabelTree.from_dict(d)


def save_trace(trace: PredictorTrace, path: str, extra: Optional[dict] = None) -> None:
    """Write a trace as JSON; ``extra`` carries whatever the caller needs to
    rebuild the referenced test functions (application kind, parameters)."""
    d = trace.to_dict()
    d["steps"] = [[g_id, float(eta)] for g_id, eta in d["steps"]]
    if extra:
        d["app"] = extra
    text = json.dumps(d)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_trace(path: str, functions: Optional[dict] = None) -> tuple[PredictorTrace, dict]:
    """Read a trace; returns (trace, app-extra dict). The caller attaches the
    function registry (or passes it here) before replaying."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    from .types import TraceStep

    trace = PredictorTrace(
        init=init_rule_from_dict(d["init"]),
        projection=projection_from_dict(d["projection"]),
        steps=[TraceStep(g_id=g, eta=float(e)) for g, e in d["steps"]],
        functions=dict(functions or {}),
    )
    return trace, d.get("app", {})
