import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oddone.core import BBox, QueryOutput
from oddone.exceptions import DimensionMismatch, EmptyCalibrationSet, OddOneError
from oddone.scoring import (
    Threshold, UnknownVariant, calibrate_threshold, decide, decide_batch, nearest_rank_quantile,
    recalibrate, recalibrate_batch, score_query, unknown_score, unknown_scores_batch,
)

BOX = BBox(0.1, 0.1, 0.5, 0.5)
probs5 = arrays(np.float64, 5, elements=st.floats(0, 1))
logits4 = arrays(np.float64, 4, elements=st.floats(-8, 8))


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def test_worked_example(smap):
    q = QueryOutput(np.array([0.9, 0.3, 0.1, 0.0, 0.2]), np.array([0.6, 0.2, 0.1, 0.1]), BOX)
    r = recalibrate(q, smap)
    np.testing.assert_allclose(r.known_probs, [0.54, 0.18, 0.02, 0.0, 0.02])
    assert unknown_score(r, q) == pytest.approx(1 - 0.76)
    assert unknown_score(r, q, "msp-super") == pytest.approx(0.4)
    assert unknown_score(r, q, "msp-recal") == pytest.approx(0.46)


def test_clamp_when_mass_exceeds_one(smap):
    q = QueryOutput(np.ones(5), np.array([0.5, 0.5, 0.0, 0.0]), BOX)
    assert score_query(q, smap).unknown_score == 0.0


def test_dimension_checks(smap):
    with pytest.raises(DimensionMismatch):
        recalibrate_batch(np.ones((2, 4)), np.full((2, 4), 0.25), smap)
    with pytest.raises(DimensionMismatch):
        recalibrate_batch(np.ones((2, 5)), np.full((2, 3), 1 / 3), smap)


def test_query_output_validation():
    with pytest.raises(OddOneError):
        QueryOutput(np.array([1.2]), np.array([1.0]), BOX)
    with pytest.raises(OddOneError):
        QueryOutput(np.array([0.2]), np.array([0.5, 0.2]), BOX)


@given(probs5, logits4)
def test_recalibration_bounded_and_order_preserving(smap, p, z):
    s = softmax(z)
    r = recalibrate_batch(p, s, smap)
    assert np.all(r >= 0) and np.all(r <= p + 1e-12)
    for k in range(3):
        m = list(smap.members(k))
        if s[k] > 0:
            # one shared multiplier per group keeps the within-group ranking
            assert np.all(np.diff(r[m]) * np.diff(p[m]) >= -1e-15)
    for v in UnknownVariant:
        assert 0.0 <= float(unknown_scores_batch(r, s, v)) <= 1.0


def test_ten_thousand_random_queries(smap):
    gen = np.random.default_rng(7)
    p = gen.random((10_000, 5))
    s = np.apply_along_axis(softmax, 1, gen.normal(scale=3, size=(10_000, 4)))
    r = recalibrate_batch(p, s, smap)
    expected = p * s[:, list(smap.assignment)]
    np.testing.assert_allclose(r, expected)
    u = unknown_scores_batch(r, s, "sum-recal")
    np.testing.assert_allclose(u, np.clip(1 - expected.sum(axis=1), 0, 1))
    assert np.all((u >= 0) & (u <= 1))


def test_variant_parsing():
    assert UnknownVariant.parse("sum-recal-thr") is UnknownVariant.SUM_RECAL_THRESHOLDED
    assert UnknownVariant.parse("MSP_SUPER") is UnknownVariant.MSP_SUPER
    with pytest.raises(KeyError):
        UnknownVariant.parse("nope")


def test_nearest_rank():
    assert nearest_rank_quantile([0.1, 0.2, 0.3, 0.4], 0.5) == 0.2
    assert nearest_rank_quantile([0.1, 0.2, 0.3, 0.4], 0.51) == 0.3
    assert nearest_rank_quantile([0.7], 0.95) == 0.7
    assert nearest_rank_quantile(np.arange(1, 21) / 20, 0.95) == 0.95


def test_calibration_errors():
    with pytest.raises(EmptyCalibrationSet):
        calibrate_threshold([])
    with pytest.raises(OddOneError):
        calibrate_threshold([1.5])
    with pytest.raises(OddOneError):
        Threshold(0.5, 1.0)


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(0, 1)), st.floats(0.5, 0.99))
def test_calibration_retains_target_fraction(scores, target):
    t = calibrate_threshold(scores, target)
    assert np.mean(scores <= t.tau) >= target - 1e-12
    assert t.calibration_size == scores.size


def test_decide_rules(smap):
    known = np.array([[0.6, 0.1], [0.2, 0.1], [0.3, 0.05]])
    u = np.array([0.3, 0.7, 0.2])
    labels, scores = decide_batch(known, u, Threshold(0.5), "sum-recal-thr")
    assert labels.tolist() == [0, 2, 0]
    np.testing.assert_allclose(scores, [0.6, 0.7, 0.3])
    labels, _ = decide_batch(known, u, None, "sum-recal")
    assert labels.tolist() == [0, 2, 0]
    with pytest.raises(OddOneError):
        decide_batch(known, u, None, "sum-recal-thr")


def test_decide_single_query(smap):
    q = QueryOutput(np.array([0.05, 0.0, 0.0, 0.0, 0.0]), np.array([0.02, 0.02, 0.01, 0.95]), BOX)
    d = decide(q, smap, Threshold(0.5))
    assert d.label == smap.n_classes and d.box == BOX
