"""Experiment configuration: a YAML file of nested sections plus dotted overrides.

Every key has a default (listed in DEFAULTS); unknown keys are rejected so a
typo in lambda, k or p cannot silently fall back to a default. ``train.method``
has no default and must be given.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .alignment import AlignmentConfig
from .operators import SearchSpace, desk_operators
from .sampling import SamplerConfig
from .tasks import TaskSpec
from .trainer import OptimizerConfig, StandaloneConfig, TrainConfig

class _Required:
    """Marker for keys without a default; survives deepcopy as the same object."""

    def __deepcopy__(self, memo):
        return self

    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

DEFAULTS: dict = {
    "seed": 0,
    "output": "run",
    "jobs": 1,
    "space": {"num_layers": 4, "num_ops": 4, "hidden": 32},
    "task": {"vocab": 16, "seq_len": 16, "generator": "markov2", "transition_seed": 0, "concentration": 0.1,
             "offset": 4, "mask_rate": 0.15, "train_seed": 1, "val_seed": 2},
    "train": {
        "method": REQUIRED, "steps": 5_000, "batch_size": 16, "warmup_steps": 500, "steps_per_epoch": 500,
        "anchor_policy": "best_so_far", "anchor_p": 30.0, "anchor_r": 10.0, "anchor_metric": "accuracy",
        "probe_pool": 16, "val_batches": 2, "val_batch_size": 32, "divergence_threshold": 1e3,
        "optimizer": {"kind": "adam", "lr": 3e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0},
        "sampler": {"k": 1, "lazy": False},
        "align": {"lam": 0.5, "block_size": 4, "warm_start_epochs": 3, "all_layers": False},
    },
    "standalone": {"steps": 2_000, "batch_size": 16, "warmup_steps": 200, "val_batches": 4, "val_batch_size": 32,
                   "metric": "accuracy", "optimizer": {"kind": "adam", "lr": 3e-3, "beta1": 0.9, "beta2": 0.999,
                                                       "eps": 1e-8, "weight_decay": 0.0}},
    "analysis": {"og_layer": 1, "m_max": 3, "repeats": 10, "batch_size": 16, "sweep_layers": [1, 2]},
    "rank": {"children": 16, "val_batches": 4, "val_batch_size": 32},
    "search": {"deletions_per_epoch": 0, "probe_paths": 32, "val_batches": 2, "val_batch_size": 32},
    "mixing": {"num_layers": 4, "num_ops": 3, "k": 1, "lazy": False, "epsilon": 0.01, "t_max": 40,
               "method": "exact", "walkers": 20_000},
}


class ConfigError(ValueError):
    pass


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value


def _merge(tree: dict, updates: dict, known: dict) -> None:
    for key, value in flatten(updates).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        _set(tree, key, value)


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    return key.strip(), value


def load_config(path=None, overrides=(), require_method: bool = False) -> "ExperimentConfig":
    tree = copy.deepcopy(DEFAULTS)
    known = flatten(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must be a mapping")
        _merge(tree, data, known)
    for item in overrides:
        key, value = parse_override(item)
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        _set(tree, key, value)
    if require_method and tree["train"]["method"] is REQUIRED:
        raise ConfigError("missing required field 'train.method'")
    return ExperimentConfig(tree)


@dataclass
class ExperimentConfig:
    tree: dict

    def __post_init__(self):
        try:
            self.space
            self.task
            if self.tree["train"]["method"] is not REQUIRED:
                self.train
            self.standalone
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def get(self, dotted: str):
        node = self.tree
        for p in dotted.split("."):
            node = node[p]
        return node

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def task(self) -> TaskSpec:
        return TaskSpec(**self.tree["task"])

    @property
    def space(self) -> SearchSpace:
        s, t = self.tree["space"], self.tree["task"]
        if s["num_ops"] not in (3, 4, 6):
            raise ConfigError("space.num_ops must be 3, 4 or 6")
        return SearchSpace(int(s["num_layers"]), tuple(desk_operators(int(s["hidden"]), int(s["num_ops"]))),
                           int(s["hidden"]), int(t["vocab"]), int(t["seq_len"]))

    @property
    def train(self) -> TrainConfig:
        t = dict(self.tree["train"])
        if t["method"] is REQUIRED:
            raise ConfigError("missing required field 'train.method'")
        t["optimizer"] = OptimizerConfig(**t["optimizer"])
        t["sampler"] = SamplerConfig(**t["sampler"])
        t["align"] = AlignmentConfig(**t["align"])
        return TrainConfig(seed=self.seed, **t)

    @property
    def standalone(self) -> StandaloneConfig:
        s = dict(self.tree["standalone"])
        s["optimizer"] = OptimizerConfig(**s["optimizer"])
        return StandaloneConfig(seed=self.seed, **s)

    def resolved(self) -> dict:
        """Plain-data view for persistence (the unset method appears as null)."""
        tree = copy.deepcopy(self.tree)
        if tree["train"]["method"] is REQUIRED:
            tree["train"]["method"] = None
        return tree
