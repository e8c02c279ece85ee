import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsnas.operators import SearchSpace, desk_operators
from wsnas.search import UNSAMPLED, ShrinkState, default_deletions, run_search, score_slots, shrink_epoch
from wsnas.supernet import SuperNet
from wsnas.tasks import TaskSpec, val_batches
from wsnas.trainer import OptimizerConfig, TrainConfig, evaluate_proxy

TASK = TaskSpec(vocab=12, seq_len=8)


def space(n, c):
    return SearchSpace(n, tuple(desk_operators(8, c)), 8, 12, 8)


def run_to_end(state, rng):
    while not state.done:
        state = shrink_epoch(state, rng.standard_normal(state.alive.shape))
    return state


def test_default_deletions():
    assert default_deletions(26, 4) == 5
    assert default_deletions(4, 3) == 1
    assert default_deletions(12, 6) == 3


def test_two_layers_three_ops_takes_four_deletions():
    state = run_to_end(ShrinkState(np.ones((2, 3), bool), 1), np.random.default_rng(0))
    assert len(state.deleted) == 4
    assert state.epoch == 4
    assert len(state.final_child()) == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.integers(1, 7), st.integers(0, 1000))
def test_shrinking_invariants(n, c, d, seed):
    rng = np.random.default_rng(seed)
    state = ShrinkState(np.ones((n, c), bool), d)
    counts = []
    while not state.done:
        before = state.alive.copy()
        state = shrink_epoch(state, rng.standard_normal((n, c)))
        assert state.alive.any(axis=1).all()
        assert np.all(state.alive <= before)
        counts.append(int(state.alive.sum()))
    assert state.epoch == math.ceil(n * (c - 1) / d)
    assert len(state.deleted) == n * (c - 1)
    assert all(b < a for a, b in zip([n * c] + counts, counts))


def test_large_rate_finishes_in_one_epoch():
    state = shrink_epoch(ShrinkState(np.ones((3, 3), bool), 100), np.zeros((3, 3)))
    assert state.done and state.epoch == 1


def test_lowest_scores_deleted_with_tie_break():
    scores = np.array([[0.5, 0.1, 0.9], [0.1, 0.7, 0.2]])
    state = shrink_epoch(ShrinkState(np.ones((2, 3), bool), 2), scores)
    assert state.deleted == [(0, 1), (1, 0)]


def test_unsampled_and_dead_slots_never_deleted():
    alive = np.ones((2, 3), bool)
    alive[0, 2] = False
    scores = np.array([[UNSAMPLED, 0.3, np.nan], [0.2, 0.1, 0.0]])
    state = shrink_epoch(ShrinkState(alive, 3), scores)
    assert (0, 0) not in state.deleted
    assert state.deleted == [(1, 2), (1, 1), (0, 1)]
    assert state.alive[0].any()


def test_validation():
    with pytest.raises(ValueError):
        ShrinkState(np.array([[True, False], [False, False]]), 1)
    with pytest.raises(ValueError):
        ShrinkState(np.ones((2, 2), bool), 0)
    with pytest.raises(RuntimeError):
        ShrinkState(np.ones((2, 2), bool), 1).final_child()


def test_state_roundtrip():
    state = shrink_epoch(ShrinkState(np.ones((2, 3), bool), 1), np.arange(6.0).reshape(2, 3))
    back = ShrinkState.from_dict(state.to_dict())
    assert np.array_equal(back.alive, state.alive) and back.trace == state.trace and back.epoch == 1


def test_single_path_scores_equal_its_proxy():
    sp = space(3, 3)
    net = SuperNet(sp, 0)
    alive = np.zeros((3, 3), bool)
    alive[[0, 1, 2], [2, 0, 1]] = True
    val = val_batches(TASK, 1, 8)
    scores = score_slots(net, ShrinkState(alive, 1), 4, val, np.random.default_rng(0))
    ref = evaluate_proxy(net, (2, 0, 1), val)
    assert np.all(scores[alive] == ref)
    assert np.isnan(scores[~alive]).all()


def test_every_alive_slot_gets_a_score():
    sp = space(4, 4)
    scores = score_slots(SuperNet(sp, 0), ShrinkState.fresh(sp), 1, val_batches(TASK, 1, 4),
                         np.random.default_rng(0))
    assert np.isfinite(scores).all()
    no_resample = score_slots(SuperNet(sp, 0), ShrinkState.fresh(sp), 1, val_batches(TASK, 1, 4),
                              np.random.default_rng(0), resample=False)
    assert (no_resample == UNSAMPLED).sum() == 12


def test_run_search_terminates_with_one_child():
    sp = space(4, 3)
    cfg = TrainConfig(method="spos", steps=24, batch_size=4, warmup_steps=2, steps_per_epoch=4,
                      optimizer=OptimizerConfig(lr=3e-3))
    epochs = []
    child, state = run_search(SuperNet(sp, 0), TASK, cfg, val_batches(TASK, 1, 4), ShrinkState.fresh(sp, 1),
                              probe_paths=4, on_epoch=lambda s, t: epochs.append(t.step))
    assert len(state.deleted) == 8 and state.epoch == 8
    assert all(state.alive[l, o] for l, o in enumerate(child))
    assert epochs == [4, 8, 12, 16, 20, 24, 24, 24]


def test_run_search_with_anchor_method_and_restricted_sampling():
    sp = space(3, 3)
    cfg = TrainConfig(method="magic_at", steps=30, batch_size=4, warmup_steps=2, steps_per_epoch=5,
                      probe_pool=4, val_batches=1, val_batch_size=4, optimizer=OptimizerConfig(lr=3e-3))
    seen = []

    def check(state, tstate):
        for rec in tstate.log.steps[len(seen):]:
            seen.append(rec)
        if tstate.anchor.anchor is not None:
            assert all(state.alive[l, o] for l, o in enumerate(tstate.anchor.anchor))

    alive_after = []
    child, state = run_search(SuperNet(sp, 0), TASK, cfg, val_batches(TASK, 1, 4), ShrinkState.fresh(sp, 2),
                              probe_paths=4, on_epoch=lambda s, t: (check(s, t), alive_after.append(s.alive.copy())))
    # every child trained after an epoch only uses slots alive at that point
    for epoch, alive in enumerate(alive_after[:-1]):
        for rec in seen[(epoch + 1) * 5:(epoch + 2) * 5]:
            assert all(alive[l, o] for l, o in enumerate(rec["child"]))
    assert len(child) == 3
