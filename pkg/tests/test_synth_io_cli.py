import json
import os

import numpy as np
import pytest

from gmc.cli import main
from gmc.errors import InvalidSpec, InvariantViolation, SchemaError
from gmc.io import emit, ingest, load_trace, load_tree, save_trace, save_tree
from gmc.projections import SimplexSpec
from gmc.synth import (
    DEFAULT_TREE_LEAVES,
    DEFAULT_TREE_PARENTS,
    SyntheticSpec,
    synth,
    synth_attrs,
    synth_groups,
)
from gmc.textgen import bias_gap, calibrate_textgen
from gmc.hierarchy import LabelTree
from gmc.types import CopyScores, PredictorTrace


def test_synth_deterministic(tmp_path):
    spec = SyntheticSpec(application="textgen", n_samples=100, seed=42, disparity=0.05)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    emit(synth(spec), str(p1))
    emit(synth(spec), str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    # a different seed produces a different file
    emit(synth(SyntheticSpec(application="textgen", n_samples=100, seed=43, disparity=0.05)), str(p2))
    assert p1.read_bytes() != p2.read_bytes()


def test_synth_spec_validation():
    with pytest.raises(InvalidSpec):
        SyntheticSpec(application="nope", n_samples=10)
    with pytest.raises(InvalidSpec):
        SyntheticSpec(application="textgen", n_samples=0)
    with pytest.raises(InvalidSpec):
        SyntheticSpec.from_dict({"application": "textgen", "n_samples": 5, "bogus": 1})


def test_planted_disparity_is_visible():
    spec = SyntheticSpec(
        application="textgen", n_samples=3000, seed=11, disparity=0.1, vocab_size=30
    )
    data = synth(spec)
    groups, attrs = synth_groups(spec), synth_attrs(spec)
    identity = PredictorTrace(init=CopyScores(), projection=SimplexSpec(dim=30))
    gap = bias_gap(identity, data, groups[0], attrs[0])
    assert 0.08 <= gap <= 0.12
    # zero disparity sits near the sampling noise floor
    clean = synth(SyntheticSpec(application="textgen", n_samples=3000, seed=11, vocab_size=30))
    gap0 = bias_gap(identity, clean, groups[0], attrs[0])
    assert gap0 < 0.02


def test_dataset_round_trip_exact(tmp_path):
    for app in ("textgen", "hierarchy", "segmentation"):
        spec = SyntheticSpec(application=app, n_samples=50, seed=7, pixels=12)
        data = synth(spec)
        path = tmp_path / f"{app}.jsonl"
        emit(data, str(path))
        back = ingest(str(path), app)
        assert len(back) == len(data)
        assert back.score_dim == data.score_dim
        assert back.group_universe == data.group_universe
        for a, b in zip(data.samples, back.samples):
            assert a.sample_id == b.sample_id
            assert a.group_bits == b.group_bits
            assert a.noise_seed == b.noise_seed
            np.testing.assert_array_equal(a.scores, b.scores)
            np.testing.assert_array_equal(np.asarray(a.label), np.asarray(b.label))


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_ingest_errors_name_the_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = '{"id":"x0","groups":[],"scores":[0.5,0.5],"label":0,"seed":0}'

    write_lines(p, [good, "not json"])
    with pytest.raises(SchemaError, match="line 2"):
        ingest(str(p), "textgen")

    write_lines(p, [good, '{"id":"x1","groups":[],"label":0}'])
    with pytest.raises(SchemaError, match="line 2.*scores"):
        ingest(str(p), "textgen")

    write_lines(p, ['{"id":"x0","groups":"F","scores":[1.0],"label":0}'])
    with pytest.raises(SchemaError, match="groups"):
        ingest(str(p), "textgen")

    write_lines(p, ['{"id":"x0","groups":[],"scores":[0.9,0.3],"label":0}'])
    with pytest.raises(SchemaError, match="not a distribution"):
        ingest(str(p), "textgen")

    write_lines(p, ['{"id":"x0","groups":[],"scores":[0.5,0.5],"label":5}'])
    with pytest.raises(SchemaError, match="outside the vocabulary|outside vocabulary"):
        ingest(str(p), "textgen")

    write_lines(p, ['{"id":"m0","groups":[],"scores":[0.5,0.5],"label":[0,0]}'])
    with pytest.raises(InvariantViolation, match="m0"):
        ingest(str(p), "segmentation")

    write_lines(p, ['{"id":"m0","groups":[],"scores":[0.5],"label":[1,0]}'])
    with pytest.raises(SchemaError, match="length"):
        ingest(str(p), "segmentation")

    with pytest.raises(SchemaError, match="no such file"):
        ingest(str(tmp_path / "missing.jsonl"), "textgen")

    write_lines(p, ['{"_meta":{"kind":"hierarchy","score_dim":2,"group_universe":[]}}', good])
    with pytest.raises(SchemaError, match="declares kind"):
        ingest(str(p), "textgen")


def test_tree_round_trip(tmp_path):
    t = LabelTree(parents=DEFAULT_TREE_PARENTS, n_leaves=DEFAULT_TREE_LEAVES)
    p = tmp_path / "tree.json"
    save_tree(t, str(p))
    back = load_tree(str(p))
    assert back.parents == t.parents and back.n_leaves == t.n_leaves
    p.write_text('{"parents": [1, 1]}', encoding="utf-8")
    with pytest.raises(SchemaError, match="leaves"):
        load_tree(str(p))


def test_trace_round_trip_replays_identically(tmp_path):
    spec = SyntheticSpec(
        application="textgen", n_samples=600, seed=2, disparity=0.05, vocab_size=10
    )
    data = synth(spec)
    groups, attrs = synth_groups(spec), synth_attrs(spec)
    trace, report = calibrate_textgen(data, groups, attrs, alpha=0.02)
    assert len(trace.steps) > 0
    p = tmp_path / "trace.json"
    save_trace(trace, str(p), extra={"application": "textgen"})
    back, app = load_trace(str(p), functions=trace.functions)
    assert app == {"application": "textgen"}
    assert [(st.g_id, st.eta) for st in back.steps] == [
        (st.g_id, st.eta) for st in trace.steps
    ]
    np.testing.assert_array_equal(back.replay_batch(data), trace.replay_batch(data))


def run_cli(args):
    return main(list(args))


def test_cli_bounds(capsys):
    code = run_cli(
        [
            "bounds", "--class-size", "16", "--alpha", "0.1", "--delta", "0.05",
            "--a", "1", "--c2", "1", "--k-l", "1", "--c-upper", "1", "--c-lower", "0",
        ]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"iteration_bound": 200, "sample_complexity": 1293}


def test_cli_synth_and_run_and_audit(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GMC_THREADS", "4")
    spec = {
        "application": "textgen",
        "n_samples": 800,
        "seed": 5,
        "disparity": 0.05,
        "vocab_size": 12,
    }
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec), encoding="utf-8")
    data_path = tmp_path / "data.jsonl"
    assert run_cli(["synth", "--spec", str(spec_path), "--out", str(data_path)]) == 0
    capsys.readouterr()

    out_dir = tmp_path / "out"
    cfg = {
        "application": "textgen",
        "data": str(data_path),
        "alpha": 0.01,
        "synth": spec,
        "out_dir": str(out_dir),
    }
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    assert run_cli(["run", "--config", str(cfg_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["halted_clean"] and summary["max_violation"] <= 0.01

    report = json.loads((out_dir / "report.json").read_text(encoding="utf-8"))
    assert report["gmc_threads"] == 4
    assert report["pre_audit"]["max_violation"] > 0.01
    assert report["post_audit"]["max_violation"] <= 0.01
    csv_lines = (out_dir / "per_group.csv").read_text(encoding="utf-8").strip().splitlines()
    assert csv_lines[0] == "g_id,pre_violation,post_violation"
    assert len(csv_lines) > 1

    assert run_cli(
        ["audit", "--data", str(data_path), "--trace", str(out_dir / "trace.json")]
    ) == 0
    audit = json.loads(capsys.readouterr().out)
    assert audit["max_violation"] <= 0.01


def test_cli_run_failure_exit_code(tmp_path, capsys):
    cfg = {
        "application": "textgen",
        "synth": {"n_samples": 500, "seed": 1, "disparity": 0.08, "vocab_size": 10},
        "alpha": 0.01,
        "max_iter": 0,
        "out_dir": str(tmp_path / "out"),
    }
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    assert run_cli(["run", "--config", str(cfg_path)]) == 1
    capsys.readouterr()


def test_cli_error_reporting(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"application": "nope", "alpha": 0.1}), encoding="utf-8")
    assert run_cli(["run", "--config", str(cfg_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "SchemaError"
    assert run_cli(["run", "--config", str(tmp_path / "missing.json")]) == 2
    capsys.readouterr()
