import numpy as np
import pytest

from gmc.core import violation
from gmc.errors import EmptyClass, InvariantViolation, NonPositiveGamma
from gmc.projections import SimplexSpec
from gmc.synth import SyntheticSpec, synth, synth_attrs, synth_groups
from gmc.textgen import (
    AttributeSet,
    Vocabulary,
    bias_gap,
    build_textgen_class,
    calibrate_textgen,
    conditional_disparity_bound,
    everyone,
    group_from_bit,
    textgen_s,
)
from gmc.types import CopyScores, Dataset, PredictorTrace, Sample


def toy_data():
    """Vocabulary of 4; two groups split 2/2; hand-set distributions."""
    rows = [
        ("x0", {"F"}, [0.4, 0.3, 0.2, 0.1]),
        ("x1", {"F"}, [0.5, 0.2, 0.2, 0.1]),
        ("x2", {"M"}, [0.1, 0.2, 0.3, 0.4]),
        ("x3", {"M"}, [0.2, 0.2, 0.3, 0.3]),
    ]
    samples = [
        Sample(sid, frozenset(bits), np.array(p), 0) for sid, bits, p in rows
    ]
    return Dataset(samples, 4, ["F", "M"], "textgen")


def toy_attrs():
    return [
        AttributeSet("u0", frozenset({0, 1}), 4),
        AttributeSet("u1", frozenset({3}), 4),
    ]


def test_vocabulary_validation():
    assert Vocabulary(("a", "b", "c")).size == 3
    with pytest.raises(InvariantViolation):
        Vocabulary(("only",))
    with pytest.raises(InvariantViolation):
        Vocabulary(("a", "a"))


def test_attribute_set_indicator():
    u = AttributeSet("u", frozenset({1, 3}), 4)
    np.testing.assert_array_equal(u.indicator, [0.0, 1.0, 0.0, 1.0])
    assert len(u) == 2
    with pytest.raises(InvariantViolation):
        AttributeSet("bad", frozenset({4}), 4)


def test_class_size_and_ids():
    groups = [group_from_bit("F"), group_from_bit("M")]
    fclass = build_textgen_class(groups, toy_attrs())
    assert len(fclass) == 2 * 2 * 2
    ids = {g.g_id for g in fclass}
    assert "+F|u0" in ids and "-M|u1" in ids
    with pytest.raises(EmptyClass):
        build_textgen_class([], toy_attrs())


def test_group_function_values():
    data = toy_data()
    groups = [group_from_bit("F")]
    u = toy_attrs()[0]
    fclass = build_textgen_class(groups, [u])
    plus = next(g for g in fclass if g.g_id == "+F|u0")
    minus = next(g for g in fclass if g.g_id == "-F|u0")
    vals = plus.batch(data.scores_matrix, data)
    # in-group rows carry the indicator, out-of-group rows are zero
    np.testing.assert_array_equal(vals[0], [1.0, 1.0, 0.0, 0.0])
    np.testing.assert_array_equal(vals[2], [0.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(minus.batch(data.scores_matrix, data), -vals)
    np.testing.assert_array_equal(
        plus.single(data.scores_matrix[1], data.samples[1]), [1.0, 1.0, 0.0, 0.0]
    )
    assert plus.norm_bound == pytest.approx(np.sqrt(2))


def test_residual_functional():
    data = toy_data()
    s = textgen_s()
    vals = data.scores_matrix
    stats = s.stats_pass(vals, data)
    out = s.batch(vals, data, stats)
    # column means of the residual vanish by construction
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-15)
    # constant distributions give exactly zero residual
    const = np.full((4, 4), 0.25)
    np.testing.assert_array_equal(s.batch(const, data, s.stats_pass(const, data)), 0.0)
    # two-point case: rows (1,0) and (0,1) center to +-0.5
    two = Dataset(
        [
            Sample("a", frozenset(), np.array([1.0, 0.0]), 0),
            Sample("b", frozenset(), np.array([0.0, 1.0]), 0),
        ],
        2,
        [],
        "textgen",
    )
    v2 = two.scores_matrix
    out2 = s.batch(v2, two, s.stats_pass(v2, two))
    np.testing.assert_array_equal(out2, [[0.5, -0.5], [-0.5, 0.5]])


def test_bias_gap_hand_value():
    data = toy_data()
    trace = PredictorTrace(init=CopyScores(), projection=SimplexSpec(dim=4))
    u0 = toy_attrs()[0]
    # masses on u0: .7, .7, .3, .4; mean .525
    # F rows centered: .175 + .175 -> mean over 4 = 0.0875
    assert bias_gap(trace, data, group_from_bit("F"), u0) == pytest.approx(0.0875)
    # "everyone" centers to exactly zero
    assert bias_gap(trace, data, everyone(), u0) == pytest.approx(0.0, abs=1e-15)
    # empty attribute set has zero mass everywhere
    empty_u = AttributeSet("none", frozenset(), 4)
    assert bias_gap(trace, data, group_from_bit("F"), empty_u) == 0.0


def test_bias_gap_equals_violation():
    data = toy_data()
    trace = PredictorTrace(init=CopyScores(), projection=SimplexSpec(dim=4))
    groups = [group_from_bit("F"), group_from_bit("M")]
    fclass = build_textgen_class(groups, toy_attrs())
    s = textgen_s()
    for a in groups:
        for u in toy_attrs():
            g = next(f for f in fclass if f.g_id == f"+{a.a_id}|{u.u_id}")
            gap = bias_gap(trace, data, a, u)
            assert abs(abs(violation(trace, g, s, data)) - gap) < 1e-12


def test_conditional_disparity_bound():
    assert conditional_disparity_bound(0.0, 0.0, 0.5) == 0.0
    assert conditional_disparity_bound(0.002, 0.002, 0.4) == pytest.approx(0.01)
    with pytest.raises(NonPositiveGamma):
        conditional_disparity_bound(0.1, 0.1, 0.0)


def test_calibrate_unbiased_corpus_takes_no_steps():
    spec = SyntheticSpec(
        application="textgen", n_samples=400, seed=7, disparity=0.0, vocab_size=10
    )
    data = synth(spec)
    groups, attrs = synth_groups(spec), synth_attrs(spec)
    # the noise floor at n=400 sits well above 0.05, so pick alpha above it
    trace, report = calibrate_textgen(data, groups, attrs, alpha=0.08)
    assert report.halted_clean
    assert report.iterations_used == 0
    assert len(trace.steps) == 0


def test_calibrate_biased_corpus():
    spec = SyntheticSpec(
        application="textgen", n_samples=1500, seed=3, disparity=0.05, vocab_size=20
    )
    data = synth(spec)
    groups, attrs = synth_groups(spec), synth_attrs(spec)
    alpha = 0.01
    trace, report = calibrate_textgen(data, groups, attrs, alpha=alpha)
    assert report.halted_clean
    assert report.max_violation <= alpha
    # every audited gap sits at or below alpha afterwards
    for a in groups:
        for u in attrs:
            assert bias_gap(trace, data, a, u) <= alpha + 1e-12
    # outputs remain valid distributions
    out = trace.replay_batch(data)
    assert out.min() >= -1e-15
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    # the correction barely moves the corpus: mean L1 shift stays small
    shift = np.abs(out - data.scores_matrix).sum(axis=1).mean()
    assert shift < 0.2


def test_calibrate_reduces_planted_gap():
    spec = SyntheticSpec(
        application="textgen", n_samples=2000, seed=5, disparity=0.08, vocab_size=12
    )
    data = synth(spec)
    groups, attrs = synth_groups(spec), synth_attrs(spec)
    identity = PredictorTrace(init=CopyScores(), projection=SimplexSpec(dim=12))
    before = bias_gap(identity, data, groups[0], attrs[0])
    assert before > 0.06  # the planted disparity is visible pre-calibration
    trace, report = calibrate_textgen(data, groups, attrs, alpha=0.005)
    assert report.halted_clean
    after = bias_gap(trace, data, groups[0], attrs[0])
    assert after <= 0.005 + 1e-12
    assert after < before / 10
