"""Super-net training regimes and standalone child training.

Methods:
  spos      uniform child per step, prediction loss only
  magic_t   gradual-change sampler, prediction loss only
  magic_a   uniform child, prediction + lam * alignment to the anchor after a warm start
  magic_at  gradual-change sampler plus anchor alignment
  avg_align uniform child aligned (every layer) to the mean trace of C random children

Sampling, data order and anchor probing use three independent RNG streams,
so switching method never changes the data a step sees.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import optim
from .alignment import BEST_SO_FAR, TOP_P, AlignmentConfig, AnchorLog, AnchorState, average_trace
from .alignment import maybe_replace_anchor, select_anchor_top_p
from .autodiff import NonFiniteError
from .operators import SearchSpace
from .sampling import MAGIC_T, UNIFORM, Sampler, SamplerConfig, sample_uniform
from .supernet import (AlignTarget, ChildNet, FrozenError, SuperNet, _PathModel, apply_update, forward_path,
                       path_loss_and_grads, save_checkpoint)
from .tasks import Batch, TaskSpec, gen_batch, task_metric, train_stream, val_batches

METHODS = ("spos", "magic_t", "magic_a", "magic_at", "avg_align")
ANCHORED = ("magic_a", "magic_at")
METRICS = ("accuracy", "neg_loss")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: Path | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def build(self):
        if self.kind == "sgd":
            return optim.SGD(lr=self.lr)
        return optim.Adam(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the reference regime is 250k steps of 1024 sequences,
    Adam peak lr 5e-4 with 10k warmup steps and weight decay 0.01."""

    method: str = "spos"
    steps: int = 20_000
    batch_size: int = 32
    warmup_steps: int = 1_000
    optimizer: OptimizerConfig = OptimizerConfig()
    sampler: SamplerConfig = SamplerConfig()
    align: AlignmentConfig = AlignmentConfig()
    seed: int = 0
    steps_per_epoch: int = 1_000
    anchor_policy: str = BEST_SO_FAR
    anchor_p: float = 30.0
    anchor_r: float = 10.0
    anchor_metric: str = "accuracy"
    probe_pool: int = 64
    val_batches: int = 2
    val_batch_size: int = 32
    divergence_threshold: float = 1e3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not 0 <= self.warmup_steps <= max(self.steps, 0):
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.val_batches < 1:
            raise ValueError("batch_size, steps_per_epoch and val_batches must be positive")
        if self.anchor_policy not in (BEST_SO_FAR, TOP_P):
            raise ValueError(f"unknown anchor policy {self.anchor_policy!r}")
        if self.anchor_metric not in METRICS:
            raise ValueError(f"unknown anchor metric {self.anchor_metric!r}")
        if self.probe_pool < 1:
            raise ValueError("probe_pool must be positive")

    @property
    def sampler_config(self) -> SamplerConfig:
        mode = MAGIC_T if self.method in ("magic_t", "magic_at") else UNIFORM
        return replace(self.sampler, mode=mode, seed=self.seed)

    @property
    def num_epochs(self) -> int:
        return -(-self.steps // self.steps_per_epoch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        d["sampler"] = SamplerConfig(**d.get("sampler", {}))
        d["align"] = AlignmentConfig(**d.get("align", {}))
        return cls(**d)


def lr_at(step: float, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay to 0 at ``steps``."""
    peak, w, n = cfg.optimizer.lr, cfg.warmup_steps, cfg.steps
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    if w > 0 and step <= w:
        return peak * step / w
    return peak * (n - step) / (n - w)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def records(self):
        for rec in self.steps:
            yield {"type": "step", **rec}
        for rec in self.epochs:
            yield {"type": "epoch", **rec}

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            (log.steps if kind == "step" else log.epochs).append(rec)
        return log

    def children(self) -> list[tuple[int, ...]]:
        return [tuple(r["child"]) for r in self.steps]


# ---------------------------------------------------------------- evaluation


def evaluate_child(model: _PathModel, child, val_set: list[Batch]) -> tuple[float, float]:
    """(-mean prediction loss, mean accuracy) of ``child`` on ``val_set``."""
    losses, accs = [], []
    for batch in val_set:
        logits, _ = forward_path(model, child, batch)
        z = logits[batch.mask]
        t = batch.targets[batch.mask]
        zmax = z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[:, 0]
        losses.append(float(np.mean(lse - z[np.arange(t.size), t])))
        accs.append(task_metric(logits, batch))
    return -float(np.mean(losses)), float(np.mean(accs))


def evaluate_proxy(model: _PathModel, child, val_set: list[Batch]) -> float:
    """Negative mean validation prediction loss of the shared-weight path."""
    return evaluate_child(model, child, val_set)[0]


def _score(model, child, val_set, metric: str) -> float:
    neg_loss, acc = evaluate_child(model, child, val_set)
    return acc if metric == "accuracy" else neg_loss


# ---------------------------------------------------------------- super-net training


@dataclass
class TrainState:
    """Everything needed to continue a run at an epoch boundary."""

    step: int
    optimizer: object
    sampler: Sampler
    data_rng: np.random.Generator
    probe_rng: np.random.Generator
    aux_rng: np.random.Generator
    anchor: AnchorState
    recent: list
    log: TrainLog
    anchor_log: AnchorLog

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "sampler_prev": list(self.sampler.prev) if self.sampler.prev is not None else None,
            "rng": {name: getattr(self, name).bit_generator.state for name in ("data_rng", "probe_rng", "aux_rng")},
            "sampler_rng": self.sampler.rng.bit_generator.state,
            "anchor": self.anchor.to_dict(),
            "recent": [list(c) for c in self.recent],
        }


def init_state(space: SearchSpace, task: TaskSpec, cfg: TrainConfig) -> TrainState:
    sampler = Sampler(space, cfg.sampler_config, rng=np.random.default_rng([cfg.seed, 11]))
    return TrainState(
        step=0,
        optimizer=cfg.optimizer.build(),
        sampler=sampler,
        data_rng=train_stream(task, cfg.seed),
        probe_rng=np.random.default_rng([cfg.seed, 13]),
        aux_rng=np.random.default_rng([cfg.seed, 19]),
        anchor=AnchorState(policy=cfg.anchor_policy, p=cfg.anchor_p, r=cfg.anchor_r),
        recent=[],
        log=TrainLog(),
        anchor_log=AnchorLog(),
    )


def restore_state(space: SearchSpace, task: TaskSpec, cfg: TrainConfig, saved: dict, optimizer,
                  log: TrainLog | None = None) -> TrainState:
    state = init_state(space, task, cfg)
    state.step = saved["step"]
    if optimizer is not None:
        state.optimizer = optimizer
    state.sampler.prev = tuple(saved["sampler_prev"]) if saved["sampler_prev"] is not None else None
    state.sampler.rng.bit_generator.state = saved["sampler_rng"]
    for name, st in saved["rng"].items():
        getattr(state, name).bit_generator.state = st
    a = saved["anchor"]
    state.anchor = AnchorState(anchor=tuple(a["anchor"]) if a["anchor"] is not None else None,
                               val_score=a["val"], policy=a["policy"], p=a["p"], r=a["r"],
                               last_eval_epoch=a["last_eval_epoch"])
    state.recent = [tuple(c) for c in saved["recent"]]
    if log is not None:
        state.log = log
    return state


def _remember(recent: list, child: tuple, limit: int) -> None:
    if child in recent:
        recent.remove(child)
    recent.append(child)
    del recent[:-limit]


def _end_of_epoch(net, cfg: TrainConfig, state: TrainState, epoch: int, val_set) -> None:
    """Score the probe pool and update the anchor."""
    record = {"epoch": epoch, "step": state.step}
    if cfg.method in ANCHORED:
        prev = state.anchor.anchor
        if cfg.anchor_policy == BEST_SO_FAR:
            pool = list(state.recent)
            if prev is not None and prev not in pool:
                pool.append(prev)
            scored = [(c, _score(net, c, val_set, cfg.anchor_metric)) for c in pool]
            # the incumbent is re-scored with the current weights before comparing
            if prev is not None:
                state.anchor = replace(state.anchor, val_score=dict(scored)[prev])
            for c, v in scored:
                state.anchor = maybe_replace_anchor(state.anchor, c, v, epoch)
        else:
            pool = [sample_uniform(net.space, state.probe_rng, state.sampler.alive) for _ in range(cfg.probe_pool)]
            scored = [(c, _score(net, c, val_set, cfg.anchor_metric)) for c in pool]
            state.anchor = select_anchor_top_p(scored, state.anchor, epoch)
        replaced = state.anchor.anchor != prev
        state.anchor_log.add(epoch, state.anchor, replaced)
        record["probe_mean"] = float(np.mean([v for _, v in scored]))
        record["anchor"] = list(state.anchor.anchor)
        record["anchor_val"] = state.anchor.val_score
        record["replaced"] = replaced
    state.log.epochs.append(record)


def _align_target(net, cfg: TrainConfig, state: TrainState, batch: Batch, epoch: int) -> AlignTarget | None:
    if cfg.method == "avg_align":
        children = [sample_uniform(net.space, state.aux_rng) for _ in range(net.space.num_ops)]
        traces = [forward_path(net, c, batch, capture=True)[1] for c in children]
        return AlignTarget(average_trace(traces), replace(cfg.align, all_layers=True))
    if cfg.method in ANCHORED and epoch >= cfg.align.warm_start_epochs and state.anchor.anchor is not None:
        return AlignTarget(forward_path(net, state.anchor.anchor, batch, capture=True)[1], cfg.align)
    return None


def train_supernet(net: SuperNet, task: TaskSpec, cfg: TrainConfig, state: TrainState | None = None,
                   stop_at: int | None = None, checkpoint_dir=None) -> tuple[SuperNet, TrainLog, TrainState]:
    """Train ``net`` in place for ``cfg.steps`` steps (or until ``stop_at``).

    Divergence (loss above ``cfg.divergence_threshold`` or non-finite) raises
    DivergenceError after writing a checkpoint into ``checkpoint_dir`` if given.
    """
    if net.frozen:
        raise FrozenError("cannot train a frozen super-net")
    state = state or init_state(net.space, task, cfg)
    val_set = val_batches(task, cfg.val_batches, cfg.val_batch_size) if cfg.method in ANCHORED else None
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step < end:
        step = state.step
        epoch = step // cfg.steps_per_epoch
        child = state.sampler.next()
        batch = gen_batch(task, state.data_rng, cfg.batch_size)
        align = _align_target(net, cfg, state, batch, epoch)
        lr = lr_at(step + 1, cfg)
        try:
            res = path_loss_and_grads(net, child, batch, align, batch_id=step)
        except NonFiniteError as exc:
            raise _diverged(net, state, checkpoint_dir, str(exc)) from exc
        if res.loss > cfg.divergence_threshold:
            raise _diverged(net, state, checkpoint_dir, f"loss {res.loss:.4g} exceeds threshold at step {step}")
        apply_update(net, res.grads, state.optimizer, lr)
        state.log.steps.append({"step": step, "child": list(child), "pred_loss": res.pred_loss,
                                "align_loss": res.align_loss if align is not None else 0.0, "lr": lr})
        _remember(state.recent, child, cfg.probe_pool)
        state.step += 1
        if state.step % cfg.steps_per_epoch == 0 or state.step == cfg.steps:
            _end_of_epoch(net, cfg, state, epoch, val_set)
    return net, state.log, state


def _diverged(net, state: TrainState, checkpoint_dir, message: str) -> DivergenceError:
    path = None
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "diverged"
        save_checkpoint(net, path, state.optimizer, {"train_state": state.to_dict(), "reason": message})
    return DivergenceError(message, state.step, path)


# ---------------------------------------------------------------- standalone training


@dataclass(frozen=True)
class StandaloneConfig:
    steps: int = 2_000
    batch_size: int = 32
    warmup_steps: int = 100
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    val_batches: int = 4
    val_batch_size: int = 32
    metric: str = "accuracy"
    divergence_threshold: float = 1e3

    def __post_init__(self):
        if self.steps < 0 or not 0 <= self.warmup_steps <= max(self.steps, 0):
            raise ValueError("need steps >= 0 and 0 <= warmup_steps <= steps")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(method="spos", steps=self.steps, batch_size=self.batch_size,
                           warmup_steps=self.warmup_steps, optimizer=self.optimizer, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StandaloneConfig":
        d = dict(d)
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        return cls(**d)


def train_standalone(space: SearchSpace, child, task: TaskSpec, cfg: StandaloneConfig) -> tuple[ChildNet, float]:
    """Train ``child`` from scratch and return (model, held-out metric)."""
    model = ChildNet(space, child, seed=cfg.seed)
    tcfg = cfg.as_train_config()
    opt = cfg.optimizer.build()
    rng = train_stream(task, cfg.seed)
    for step in range(cfg.steps):
        batch = gen_batch(task, rng, cfg.batch_size)
        res = path_loss_and_grads(model, model.child, batch, batch_id=step)
        if res.loss > cfg.divergence_threshold:
            raise DivergenceError(f"standalone loss {res.loss:.4g} at step {step}", step)
        apply_update(model, res.grads, opt, lr_at(step + 1, tcfg))
    val_set = val_batches(task, cfg.val_batches, cfg.val_batch_size)
    return model, _score(model, model.child, val_set, cfg.metric)
