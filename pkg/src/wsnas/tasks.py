"""Seeded synthetic masked-token tasks.

Token ids 0 and 1 are reserved (PAD, MASK); generators emit ids >= 2.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

PAD = 0
MASK = 1
FIRST_SYMBOL = 2
GENERATORS = ("markov2", "copy_shift", "periodic")


@dataclass(frozen=True)
class TaskSpec:
    vocab: int = 16
    seq_len: int = 32
    generator: str = "markov2"
    transition_seed: int = 0
    concentration: float = 0.1
    offset: int = 4
    mask_rate: float = 0.15
    train_seed: int = 1
    val_seed: int = 2

    def __post_init__(self):
        if self.vocab < 4:
            raise ValueError("vocab must be at least 4")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.train_seed == self.val_seed:
            raise ValueError("train and val streams need different seeds")
        if self.generator != "markov2" and not 0 < self.offset < self.seq_len:
            raise ValueError(f"{self.generator} offset must lie in (0, seq_len)")

    @property
    def num_symbols(self) -> int:
        return self.vocab - FIRST_SYMBOL

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    tokens: np.ndarray      # (B, L) ids fed to the model, MASK at masked positions
    mask: np.ndarray        # (B, L) bool, True where a prediction is scored
    targets: np.ndarray     # (B, L) original ids at masked positions, -1 elsewhere
    pad_mask: np.ndarray    # (B, L) bool, True on real tokens

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def digest(self) -> bytes:
        import hashlib
        return hashlib.sha1(self.tokens.tobytes() + self.targets.tobytes()).digest()


@lru_cache(maxsize=32)
def transition_table(num_symbols: int, seed: int, concentration: float) -> np.ndarray:
    """Order-2 table: ``T[a, b]`` is the distribution of the token following (a, b)."""
    rng = np.random.default_rng([seed, 7919])
    table = rng.dirichlet(np.full(num_symbols, concentration), size=(num_symbols, num_symbols))
    table.setflags(write=False)
    return table


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])[:, None]
    idx = (probs.cumsum(axis=1) < u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def gen_sequences(spec: TaskSpec, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    s, n = spec.num_symbols, spec.seq_len
    seqs = np.empty((batch_size, n), dtype=np.int64)
    if spec.generator == "markov2":
        table = transition_table(s, spec.transition_seed, spec.concentration)
        seqs[:, :2] = rng.integers(0, s, size=(batch_size, min(2, n)))
        for t in range(2, n):
            seqs[:, t] = _sample_rows(table[seqs[:, t - 2], seqs[:, t - 1]], rng)
    elif spec.generator == "copy_shift":
        p = spec.offset
        seqs[:, :p] = rng.integers(0, s, size=(batch_size, p))
        for t in range(p, n):
            seqs[:, t] = seqs[:, t - p]
    else:
        # each row repeats a random motif whose period is uniform on 1..offset,
        # so reaching further along the sequence recovers more masked tokens
        period = rng.integers(1, spec.offset + 1, size=batch_size)
        motif = rng.integers(0, s, size=(batch_size, spec.offset))
        seqs[:] = motif[np.arange(batch_size)[:, None], np.arange(n)[None, :] % period[:, None]]
    return seqs + FIRST_SYMBOL


def gen_batch(spec: TaskSpec, rng: np.random.Generator, batch_size: int = 32) -> Batch:
    seqs = gen_sequences(spec, batch_size, rng)
    mask = rng.random(seqs.shape) < spec.mask_rate
    while not mask.any():  # a batch with nothing to predict has no loss; redraw the mask
        mask = rng.random(seqs.shape) < spec.mask_rate
    return Batch(
        tokens=np.where(mask, MASK, seqs),
        mask=mask,
        targets=np.where(mask, seqs, -1),
        pad_mask=np.ones(seqs.shape, dtype=bool),
    )


def train_stream(spec: TaskSpec, seed: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.train_seed, seed, 101])


def val_stream(spec: TaskSpec) -> np.random.Generator:
    return np.random.default_rng([spec.val_seed, 202])


def val_batches(spec: TaskSpec, count: int, batch_size: int = 32) -> list[Batch]:
    """A fixed held-out shard; identical for a given spec."""
    rng = val_stream(spec)
    return [gen_batch(spec, rng, batch_size) for _ in range(count)]


def task_metric(logits: np.ndarray, batch: Batch) -> float:
    """Top-1 accuracy over masked positions.

    Tied maxima share the credit, so constant logits score exactly 1/V.
    """
    if not batch.mask.any():
        raise ValueError("batch has no masked positions")
    z = np.asarray(logits)[batch.mask]
    t = batch.targets[batch.mask]
    top = z.max(axis=-1, keepdims=True)
    is_max = z == top
    hit = is_max[np.arange(t.size), t]
    return float((hit / is_max.sum(axis=-1)).mean())


def dump_dataset(spec: TaskSpec, path: str | Path, num_sequences: int, seed: int) -> None:
    """Write raw sequences as little-endian int32 plus a JSON header."""
    path = Path(path)
    seqs = gen_sequences(spec, num_sequences, np.random.default_rng(seed))
    path.with_suffix(".bin").write_bytes(seqs.astype("<i4").tobytes())
    header = {"V": spec.vocab, "L": spec.seq_len, "generator": spec.generator, "seed": seed,
              "count": num_sequences, "spec": spec.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    seqs = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<i4")
    return header, seqs.reshape(header["count"], header["L"]).astype(np.int64)
