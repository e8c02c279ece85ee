import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsnas import autodiff as ad
from wsnas.alignment import (AlignmentConfig, AnchorLog, AnchorState, aligned_layers, alignment_loss,
                             average_trace, combined_loss, maybe_replace_anchor, select_anchor_top_p,
                             top_percentiles)

ONE = AlignmentConfig(block_size=1)


def test_aligned_layers():
    assert aligned_layers(8, AlignmentConfig(block_size=4)) == [3, 7]
    assert aligned_layers(6, AlignmentConfig(block_size=4)) == [3, 5]
    assert aligned_layers(5, AlignmentConfig(block_size=5)) == [4]
    assert aligned_layers(3, AlignmentConfig(block_size=4)) == [2]
    assert aligned_layers(3, AlignmentConfig(all_layers=True)) == [0, 1, 2]


def test_config_validation():
    with pytest.raises(ValueError):
        AlignmentConfig(lam=-1.0)
    with pytest.raises(ValueError):
        AlignmentConfig(lam=float("nan"))
    with pytest.raises(ValueError):
        AlignmentConfig(block_size=0)


def test_identical_traces_zero():
    t = [np.ones((2, 3)), np.arange(6.0).reshape(2, 3)]
    assert alignment_loss(t, t, ONE) == 0.0


def test_hand_mse():
    assert alignment_loss([np.array([[1.0, 1.0]])], [np.array([[0.0, 1.0]])], ONE) == pytest.approx(0.5)


def test_block_size_n_uses_only_last_layer():
    a = [np.zeros(2), np.zeros(2), np.zeros(2)]
    c = [np.ones(2), np.ones(2), np.full(2, 2.0)]
    assert alignment_loss(a, c, AlignmentConfig(block_size=3)) == pytest.approx(4.0)


def test_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        alignment_loss([np.zeros(2)], [np.zeros(3)], ONE)
    with pytest.raises(ad.ShapeError):
        alignment_loss([np.zeros(2)], [np.zeros(2), np.zeros(2)], ONE)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_nonnegative_and_symmetric_value(seed):
    rng = np.random.default_rng(seed)
    a = [rng.standard_normal((2, 3)) for _ in range(4)]
    c = [rng.standard_normal((2, 3)) for _ in range(4)]
    cfg = AlignmentConfig(block_size=2)
    assert alignment_loss(a, c, cfg) >= 0
    assert alignment_loss(a, c, cfg) == pytest.approx(alignment_loss(c, a, cfg))


def test_gradient_flows_only_into_child():
    anchor = [ad.parameter(np.ones((2, 2)))]
    child = [ad.parameter(np.zeros((2, 2)))]
    ad.backward(alignment_loss(anchor, child, ONE))
    assert anchor[0].grad is None
    np.testing.assert_allclose(child[0].grad, -0.5 * np.ones((2, 2)))


def test_combined_loss_values_and_gradient():
    assert combined_loss(2.0, 0.5, 0.5) == 2.25
    assert combined_loss(2.0, 0.5, 0.0) == 2.0
    rng = np.random.default_rng(0)
    x0, target = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))

    def grad(lam, which):
        x = ad.parameter(x0)
        pred = ad.total(ad.gelu(x))
        align = alignment_loss([target], [ad.square(x)], ONE)
        loss = {"both": combined_loss(pred, align, lam), "pred": pred, "align": align}[which]
        ad.backward(loss)
        return x.grad

    np.testing.assert_allclose(grad(0.5, "both"), grad(0, "pred") + 0.5 * grad(0, "align"), rtol=1e-12)


def test_average_trace():
    t = [np.zeros(2), np.ones(3)]
    assert all(np.array_equal(a, b) for a, b in zip(average_trace([t]), t))
    np.testing.assert_array_equal(average_trace([[np.array([0.0])], [np.array([2.0])]])[0], [1.0])
    rng = np.random.default_rng(1)
    traces = [[rng.standard_normal(3)] for _ in range(4)]
    np.testing.assert_allclose(average_trace(traces)[0], average_trace(traces[::-1])[0], rtol=1e-15)
    with pytest.raises(ValueError):
        average_trace([])


def test_strict_replacement():
    s = AnchorState(anchor=(0, 0), val_score=0.5)
    assert maybe_replace_anchor(s, (1, 1), 0.5).anchor == (0, 0)
    assert maybe_replace_anchor(s, (1, 1), 0.5 + 1e-12).anchor == (1, 1)
    assert maybe_replace_anchor(AnchorState(), (2, 2), -1e9).anchor == (2, 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_fold_keeps_first_argmax(vals):
    s = AnchorState()
    scores = []
    for i, v in enumerate(vals):
        s = maybe_replace_anchor(s, (i,), v)
        scores.append(s.val_score)
    best = int(np.argmax(vals))
    assert s.anchor == (best,)
    assert all(b >= a for a, b in zip(scores, scores[1:]))


def test_top_percentiles():
    np.testing.assert_allclose(top_percentiles([5, 4, 3, 2, 1]), [20, 40, 60, 80, 100])
    np.testing.assert_allclose(top_percentiles([1, 1]), [50, 50])


def _pool(n=20):
    return [((i,), float(n - i)) for i in range(n)]  # child (i,) sits at top percentile 5(i+1)


def test_top_p_keeps_incumbent_at_p():
    s = AnchorState(anchor=(5,), policy="top_p", p=30, r=10)
    assert select_anchor_top_p(_pool(), s).anchor == (5,)


def test_top_p_replaces_absent_incumbent():
    s = AnchorState(anchor=(99,), policy="top_p", p=30, r=10)
    assert select_anchor_top_p(_pool(), s).anchor == (5,)


def test_top_p_hysteresis_edges():
    s = AnchorState(policy="top_p", p=30, r=10)
    # percentile 40 = p + r stays; 45 escapes the band
    assert select_anchor_top_p(_pool(), AnchorState(anchor=(7,), policy="top_p", p=30, r=10)).anchor == (7,)
    assert select_anchor_top_p(_pool(), AnchorState(anchor=(8,), policy="top_p", p=30, r=10)).anchor == (5,)
    assert select_anchor_top_p(_pool(), AnchorState(anchor=(3,), policy="top_p", p=30, r=10)).anchor == (3,)
    assert select_anchor_top_p(_pool(), AnchorState(anchor=(2,), policy="top_p", p=30, r=10)).anchor == (5,)
    assert select_anchor_top_p(_pool(), s).anchor == (5,)


def test_top_p_drift_beyond_band_replaced():
    # pool of 100: incumbent at percentile 41 = p + 11 leaves the band
    pool = [((i,), float(100 - i)) for i in range(100)]
    s = AnchorState(anchor=(40,), policy="top_p", p=30, r=10)
    assert select_anchor_top_p(pool, s).anchor == (29,)


def test_top_p_tie_prefers_higher_score():
    pool = [((0,), 1.0), ((1,), 3.0), ((2,), 2.0), ((3,), 0.0)]
    # percentiles 75, 25, 50, 100; p = 37.5 is equidistant from 25 and 50
    s = select_anchor_top_p(pool, AnchorState(policy="top_p", p=37.5, r=5))
    assert s.anchor == (1,)


def test_anchor_state_validation():
    with pytest.raises(ValueError):
        AnchorState(policy="top_p", p=0, r=10)
    with pytest.raises(ValueError):
        AnchorState(policy="other")


def test_anchor_log_jsonl(tmp_path):
    log = AnchorLog()
    log.add(0, AnchorState(anchor=(1, 2), val_score=0.3), True)
    log.add(1, AnchorState(anchor=(1, 2), val_score=0.3), False)
    log.write(tmp_path / "a.jsonl")
    recs = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert recs[0] == {"epoch": 0, "anchor": [1, 2], "val": 0.3, "replaced": True, "policy": "best_so_far"}
    assert recs[1]["replaced"] is False
