import numpy as np
import pytest

from gmc.core import run_gmc, violation
from gmc.errors import DimensionNotOne, InvalidDelta, InvariantViolation
from gmc.projections import BoxSpec
from gmc.reductions import (
    ReductionPreset,
    constant_discriminator,
    happymap_preset,
    multiaccuracy_preset,
    multiaccuracy_s,
    multivalid_preset,
    oi_preset,
    onehot_labels,
    quantile_linearized_preset,
    squared_quantile_error,
)
from gmc.textgen import everyone, group_from_bit
from gmc.types import CopyScores, Dataset, GmcConfig, PredictorTrace, Sample


def scalar_data(rows, universe=("a0", "a1")):
    """rows: (score, label, bits) triples with scalar scores."""
    samples = [
        Sample(f"r{i}", frozenset(bits), np.array([float(x)]), y)
        for i, (x, y, bits) in enumerate(rows)
    ]
    return Dataset(samples, 1, list(universe), "generic")


def biased_scalar_instance(n=400, seed=0):
    """Group a0 predictions sit above their labels, a1 below."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        bit = "a0" if i % 2 == 0 else "a1"
        y = int(rng.random() < 0.5)
        off = 0.15 if bit == "a0" else -0.15
        rows.append((np.clip(y * 0.6 + 0.2 + off + rng.normal(0, 0.05), 0, 1), y, {bit}))
    return scalar_data(rows)


def test_preset_kind_validation():
    ReductionPreset(kind="oi", parameters={})
    with pytest.raises(InvariantViolation):
        ReductionPreset(kind="unknown", parameters={})


def test_happymap_identity_and_dim_checks():
    groups = [group_from_bit("a0")]
    s, fclass = multiaccuracy_preset(groups)
    s2, fclass2 = happymap_preset(s, fclass)
    assert s2 is s
    assert [g.g_id for g in fclass2] == [g.g_id for g in fclass]
    bad_s = oi_preset([constant_discriminator("d", np.ones(3))], 3)[0]
    with pytest.raises(DimensionNotOne):
        happymap_preset(bad_s, fclass)
    with pytest.raises(DimensionNotOne):
        happymap_preset(s, [constant_discriminator("d", np.ones(3))])


def test_multiaccuracy_residual_hand_values():
    data = scalar_data([(0.8, 1, {"a0"}), (0.4, 0, {"a0"}), (0.5, 1, {"a1"})])
    s = multiaccuracy_s()
    out = s.batch(data.scores_matrix, data, None)
    np.testing.assert_allclose(out[:, 0], [-0.2, 0.4, -0.5])


def test_multiaccuracy_violation_and_run():
    data = biased_scalar_instance()
    groups = [group_from_bit("a0"), group_from_bit("a1")]
    s, fclass = multiaccuracy_preset(groups)
    identity = PredictorTrace(init=CopyScores(), projection=BoxSpec(lo=0.0, hi=1.0))
    g0 = next(g for g in fclass if g.g_id == "+a0")
    before = violation(identity, g0, s, data)
    assert before > 0.05  # the planted offset shows up pre-calibration
    config = GmcConfig(alpha=0.01, eta=0.02, max_iter=5000)
    trace, report = run_gmc(
        config, s, fclass, data, None, CopyScores(), BoxSpec(lo=0.0, hi=1.0)
    )
    assert report.halted_clean
    assert report.max_violation <= 0.01
    # group-conditional means of f now track the label means
    f = trace.replay_batch(data)[:, 0]
    y = np.array([float(x.label) for x in data.samples])
    for a in groups:
        m = a.mask(data)
        assert abs(np.mean(m * (f - y))) <= 0.01 + 1e-12


def test_onehot_labels():
    data = scalar_data([(0.1, 2, {"a0"}), (0.2, 0, {"a1"})])
    out = onehot_labels(data, 3)
    np.testing.assert_array_equal(out, [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(InvariantViolation):
        onehot_labels(data, 2)


def test_oi_preset_residual_and_checks():
    samples = [
        Sample("o0", frozenset(), np.array([0.7, 0.2, 0.1]), 0),
        Sample("o1", frozenset(), np.array([0.1, 0.6, 0.3]), 2),
    ]
    data = Dataset(samples, 3, [], "generic")
    d = constant_discriminator("d0", np.array([1.0, 0.0, -1.0]))
    s, fclass = oi_preset([d], 3)
    out = s.batch(data.scores_matrix, data, None)
    np.testing.assert_allclose(out, [[-0.3, 0.2, 0.1], [0.1, 0.6, -0.7]])
    # distinguisher advantage: mean <d, residual>
    adv = np.mean(np.sum(fclass[0].batch(data.scores_matrix, data) * out, axis=1))
    assert adv == pytest.approx(((-0.3 - 0.1) + (0.1 + 0.7)) / 2)
    with pytest.raises(DimensionNotOne):
        oi_preset([constant_discriminator("bad", np.ones(2))], 3)
    with pytest.raises(InvariantViolation):
        oi_preset([d], 1)


def test_multivalid_bucket_membership():
    s, fclass = multivalid_preset(4, 0.1, [everyone()])
    assert len(fclass) == 2 * 1 * 4
    b4 = next(g for g in fclass if g.g_id == "+everyone|bucket4")
    b1 = next(g for g in fclass if g.g_id == "+everyone|bucket1")
    data = scalar_data([(0.5, 0, set()), (0.5, 0, set())], universe=())
    q = np.array([[0.1], [1.0]])  # bucket 1, and the top endpoint in bucket 4
    np.testing.assert_array_equal(b1.batch(q, data)[:, 0], [1.0, 0.0])
    np.testing.assert_array_equal(b4.batch(q, data)[:, 0], [0.0, 1.0])
    # an untouched bucket contributes nothing
    b2 = next(g for g in fclass if g.g_id == "+everyone|bucket2")
    np.testing.assert_array_equal(b2.batch(q, data)[:, 0], [0.0, 0.0])


def test_multivalid_residual_hand_sum():
    s, _ = multivalid_preset(1, 0.25, [everyone()])
    data = scalar_data([(0.3, 0, set()), (0.9, 0, set())], universe=())
    q = np.array([[0.5], [0.5]])
    # scores 0.3 <= 0.5 and 0.9 > 0.5; residuals 1-0.75 and 0-0.75
    np.testing.assert_allclose(s.batch(q, data, None)[:, 0], [0.25, -0.75])
    with pytest.raises(InvalidDelta):
        multivalid_preset(1, 0.0, [everyone()])
    with pytest.raises(InvariantViolation):
        multivalid_preset(0, 0.1, [everyone()])


def test_quantile_linearized_residual():
    s, fclass = quantile_linearized_preset(0.8, [group_from_bit("a0")])
    data = scalar_data([(0.3, 0, {"a0"}), (0.9, 0, {"a0"})])
    f = np.array([[0.5], [0.5]])
    np.testing.assert_allclose(s.batch(f, data, None)[:, 0], [-0.2, 0.8])
    assert {g.g_id for g in fclass} == {"+a0", "-a0"}
    with pytest.raises(InvariantViolation):
        quantile_linearized_preset(1.0, [group_from_bit("a0")])


def test_linearized_quantile_is_not_squared_error():
    """Opposite-sign level errors cancel linearly but not when squared."""
    data = scalar_data(
        [(0.1, 0, set()), (0.2, 0, set()), (0.8, 0, set()), (0.9, 0, set())],
        universe=(),
    )
    # predictions 0.3 cover their scores fully; predictions 0.7 not at all
    f = np.array([[0.3], [0.3], [0.7], [0.7]])
    q = 0.5
    s, _ = quantile_linearized_preset(q, [everyone()])
    linear = abs(np.mean(s.batch(f, data, None)[:, 0]))
    assert linear < 1e-12
    squared = squared_quantile_error(data, f, everyone(), q)
    assert squared == pytest.approx(0.25)


def test_squared_quantile_error_zero_cases():
    data = scalar_data([(0.1, 0, {"a0"}), (0.9, 0, {"a0"})])
    # each level exactly at the target coverage
    f = np.array([[0.1], [0.2]])
    assert squared_quantile_error(data, f, group_from_bit("a1"), 0.5) == 0.0
    f_perfect = np.array([[0.1], [0.9]])
    assert squared_quantile_error(data, f_perfect, group_from_bit("a0"), 1.0) == 0.0
