"""Progressive shrinking: alternate training epochs with deletion of the
lowest-scoring (layer, operator) slots until one child remains."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AnchorState
from .operators import SearchSpace
from .sampling import sample_uniform
from .supernet import SuperNet
from .tasks import Batch, TaskSpec
from .trainer import TrainConfig, TrainState, evaluate_proxy, init_state, train_supernet

UNSAMPLED = float("-inf")


def default_deletions(num_layers: int, num_ops: int) -> int:
    """Deletion rate scaled from five per epoch on a 26-layer, 4-candidate space."""
    return max(1, round(5 * num_layers * num_ops / (26 * 4)))


@dataclass
class ShrinkState:
    alive: np.ndarray
    deletions_per_epoch: int
    scores: np.ndarray | None = None
    trace: list = field(default_factory=list)
    epoch: int = 0

    def __post_init__(self):
        self.alive = np.asarray(self.alive, dtype=bool)
        if self.deletions_per_epoch < 1:
            raise ValueError("deletions_per_epoch must be positive")
        if not self.alive.any(axis=1).all():
            raise ValueError("every layer needs at least one alive operator")

    @classmethod
    def fresh(cls, space: SearchSpace, deletions_per_epoch: int | None = None) -> "ShrinkState":
        d = deletions_per_epoch or default_deletions(space.num_layers, space.num_ops)
        return cls(np.ones((space.num_layers, space.num_ops), dtype=bool), d)

    @property
    def removable(self) -> int:
        return int(self.alive.sum() - self.alive.shape[0])

    @property
    def done(self) -> bool:
        return self.removable == 0

    @property
    def deleted(self) -> list[tuple[int, int]]:
        return [tuple(x) for rec in self.trace for x in rec["deleted"]]

    def final_child(self) -> tuple[int, ...]:
        if not self.done:
            raise RuntimeError(f"{self.removable} slots still removable")
        return tuple(int(np.flatnonzero(row)[0]) for row in self.alive)

    def to_dict(self) -> dict:
        return {"alive": self.alive.astype(int).tolist(), "deletions_per_epoch": self.deletions_per_epoch,
                "trace": self.trace, "epoch": self.epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "ShrinkState":
        return cls(np.array(d["alive"], dtype=bool), d["deletions_per_epoch"], trace=list(d["trace"]),
                   epoch=d["epoch"])


def score_slots(net: SuperNet, state: ShrinkState, probe_paths: int, val_set: list[Batch],
                rng: np.random.Generator, resample: bool = True) -> np.ndarray:
    """Mean path proxy per alive slot over ``probe_paths`` uniformly drawn alive paths.

    Slots no path passed through hold the UNSAMPLED sentinel; with ``resample``
    each such slot gets one extra path forced through it. Dead slots are NaN.
    """
    space = net.space
    sums = np.zeros(state.alive.shape)
    counts = np.zeros(state.alive.shape, dtype=int)
    cache: dict = {}

    def visit(child):
        if child not in cache:
            cache[child] = evaluate_proxy(net, child, val_set)
        for layer, op in enumerate(child):
            sums[layer, op] += cache[child]
            counts[layer, op] += 1

    for _ in range(probe_paths):
        visit(sample_uniform(space, rng, state.alive))
    if resample:
        for layer, op in zip(*np.nonzero(state.alive & (counts == 0))):
            child = list(sample_uniform(space, rng, state.alive))
            child[layer] = int(op)
            visit(tuple(child))
    scores = np.full(state.alive.shape, np.nan)
    seen = state.alive & (counts > 0)
    scores[seen] = sums[seen] / counts[seen]
    scores[state.alive & (counts == 0)] = UNSAMPLED
    return scores


def shrink_epoch(state: ShrinkState, scores: np.ndarray | None = None) -> ShrinkState:
    """Delete up to d lowest-scoring alive slots, never emptying a layer.

    Ties go to the lower (layer, op); unsampled slots are never deleted.
    """
    scores = state.scores if scores is None else scores
    if scores is None:
        raise ValueError("no slot scores")
    alive = state.alive.copy()
    order = sorted((float(scores[l, o]), int(l), int(o)) for l, o in zip(*np.nonzero(alive))
                   if np.isfinite(scores[l, o]))
    deleted = []
    for _, layer, op in order:
        if len(deleted) == state.deletions_per_epoch:
            break
        if alive[layer].sum() > 1:
            alive[layer, op] = False
            deleted.append((layer, op))
    record = {"epoch": state.epoch, "deleted": [list(x) for x in deleted],
              "slot_scores": [[None if not np.isfinite(v) else float(v) for v in row] for row in scores],
              "alive_count": int(alive.sum())}
    return ShrinkState(alive, state.deletions_per_epoch, scores, state.trace + [record], state.epoch + 1)


def write_trace(state: ShrinkState, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in state.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def run_search(net: SuperNet, task: TaskSpec, train_cfg: TrainConfig, val_set: list[Batch],
               state: ShrinkState | None = None, probe_paths: int = 32, seed: int = 0,
               train_state: TrainState | None = None, on_epoch=None) -> tuple[tuple[int, ...], ShrinkState]:
    """Train one epoch, score, shrink; repeat until one child remains.

    Training stops once ``train_cfg.steps`` is exhausted; later shrink epochs
    only rescore. ``on_epoch(shrink_state, train_state)`` is called after each epoch.
    """
    state = state or ShrinkState.fresh(net.space)
    tstate = train_state or init_state(net.space, task, train_cfg)
    tstate.sampler.set_alive(state.alive)
    while not state.done:
        if tstate.step < train_cfg.steps:
            train_supernet(net, task, train_cfg, tstate, stop_at=tstate.step + train_cfg.steps_per_epoch)
        rng = np.random.default_rng([seed, state.epoch, 41])
        scores = score_slots(net, state, probe_paths, val_set, rng)
        state = shrink_epoch(state, scores)
        tstate.sampler.set_alive(state.alive)
        anchor = tstate.anchor.anchor
        if anchor is not None and not all(state.alive[l, o] for l, o in enumerate(anchor)):
            tstate.anchor = AnchorState(policy=tstate.anchor.policy, p=tstate.anchor.p, r=tstate.anchor.r,
                                        last_eval_epoch=tstate.anchor.last_eval_epoch)
        tstate.recent = [c for c in tstate.recent if all(state.alive[l, o] for l, o in enumerate(c))]
        if on_epoch is not None:
            on_epoch(state, tstate)
    return state.final_child(), state
