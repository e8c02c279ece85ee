import numpy as np
import pytest

from wsnas.operators import SearchSpace, conv
from wsnas.tasks import (FIRST_SYMBOL, MASK, TaskSpec, dump_dataset, gen_batch, gen_sequences, load_dataset,
                         task_metric, train_stream, transition_table, val_batches, val_stream)
from wsnas.trainer import StandaloneConfig, train_standalone


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(vocab=3)
    with pytest.raises(ValueError):
        TaskSpec(mask_rate=1.0)
    with pytest.raises(ValueError):
        TaskSpec(train_seed=5, val_seed=5)
    with pytest.raises(ValueError):
        TaskSpec(generator="copy_shift", offset=40, seq_len=32)


def test_mask_rate_within_three_sigma():
    spec = TaskSpec()
    rng = np.random.default_rng(0)
    masks = np.concatenate([gen_batch(spec, rng, 32).mask.ravel() for _ in range(10)])
    n, p = masks.size, spec.mask_rate
    assert n >= 10_000
    assert abs(masks.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_batch_fields_consistent():
    spec = TaskSpec()
    b = gen_batch(spec, np.random.default_rng(1), 8)
    assert np.all((b.targets >= 0) == b.mask)
    assert np.all(b.tokens[b.mask] == MASK)
    assert b.tokens.max() < spec.vocab and b.targets[b.mask].min() >= FIRST_SYMBOL
    assert b.pad_mask.all()


def test_same_rng_state_same_batch():
    spec = TaskSpec()
    a = gen_batch(spec, np.random.default_rng(7), 4)
    b = gen_batch(spec, np.random.default_rng(7), 4)
    assert a.digest() == b.digest()


def test_markov2_trigram_frequencies_match_table():
    spec = TaskSpec(vocab=6, seq_len=64)
    table = transition_table(spec.num_symbols, spec.transition_seed, spec.concentration)
    seqs = gen_sequences(spec, 2000, np.random.default_rng(0)) - FIRST_SYMBOL
    a, b, c = seqs[:, :-2].ravel(), seqs[:, 1:-1].ravel(), seqs[:, 2:].ravel()
    checked = 0
    for i in range(spec.num_symbols):
        for j in range(spec.num_symbols):
            sel = (a == i) & (b == j)
            n = sel.sum()
            if n < 200:
                continue
            freq = np.bincount(c[sel], minlength=spec.num_symbols) / n
            sigma = np.sqrt(table[i, j] * (1 - table[i, j]) / n)
            # 3 sigma per cell, with a small allowance for the many cells tested
            assert np.all(np.abs(freq - table[i, j]) <= 3 * sigma + 1e-3)
            checked += 1
    assert checked >= 5


def test_copy_shift_and_periodic_generators():
    s = gen_sequences(TaskSpec(generator="copy_shift", offset=3), 5, np.random.default_rng(0))
    np.testing.assert_array_equal(s[:, 3:], s[:, :-3])
    spec = TaskSpec(generator="periodic", offset=5)
    s = gen_sequences(spec, 200, np.random.default_rng(0))
    periods = [next(p for p in range(1, 6) if np.array_equal(row[p:], row[:-p])) for row in s]
    assert set(periods) <= set(range(1, 6))
    assert len(set(periods)) >= 4


def test_metric_one_hot_and_uniform():
    spec = TaskSpec()
    b = gen_batch(spec, np.random.default_rng(3), 16)
    onehot = np.eye(spec.vocab)[np.where(b.mask, b.targets, 0)]
    assert task_metric(onehot, b) == 1.0
    assert task_metric(np.zeros(onehot.shape), b) == pytest.approx(1 / spec.vocab)
    assert task_metric(7.5 * onehot, b) == task_metric(onehot, b)


def test_metric_requires_masked_positions():
    b = gen_batch(TaskSpec(), np.random.default_rng(3), 2)
    b.mask[:] = False
    with pytest.raises(ValueError):
        task_metric(np.zeros(b.tokens.shape + (16,)), b)


def test_train_and_val_streams_disjoint():
    spec = TaskSpec()
    tr, va = train_stream(spec, 0), val_stream(spec)
    train = {gen_batch(spec, tr).digest() for _ in range(10_000)}
    val = {gen_batch(spec, va).digest() for _ in range(10_000)}
    assert not train & val


def test_val_shard_fixed():
    spec = TaskSpec()
    assert [b.digest() for b in val_batches(spec, 3)] == [b.digest() for b in val_batches(spec, 3)]


def test_dump_roundtrip(tmp_path):
    spec = TaskSpec(seq_len=12)
    dump_dataset(spec, tmp_path / "data", 7, seed=4)
    header, seqs = load_dataset(tmp_path / "data")
    assert header["V"] == spec.vocab and header["L"] == 12 and header["generator"] == "markov2"
    np.testing.assert_array_equal(seqs, gen_sequences(spec, 7, np.random.default_rng(4)))


def test_markov2_is_learnable_by_two_conv3_layers():
    spec = TaskSpec()
    space = SearchSpace(2, (conv(32, 3), conv(32, 5)), 32, spec.vocab, spec.seq_len)
    _, acc = train_standalone(space, (0, 0), spec, StandaloneConfig(seed=0))
    chance = 1 / spec.num_symbols
    # pinned regression value for seed 0 with default standalone settings
    assert acc >= chance + 0.05
