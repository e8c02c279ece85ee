"""Gradient-interference probes and rank correlation of super-net proxies.

Layer numbers in probes are 1-based: ``og_layer=j`` probes the shared operator
at layer j, and the children differ on layers j+1 .. j+m.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import GradientVector, flatten_gradients
from .operators import SearchSpace
from .supernet import SuperNet, path_loss_and_grads
from .tasks import Batch, TaskSpec, gen_batch
from .trainer import StandaloneConfig, evaluate_proxy, train_standalone


class DegenerateCosineWarning(RuntimeWarning):
    pass


def _as_array(v) -> np.ndarray:
    return v.values if isinstance(v, GradientVector) else np.asarray(v, dtype=np.float64).ravel()


def cosine_with_flag(a, b) -> tuple[float, bool]:
    """Cosine similarity and a flag that is True when either vector is zero (value then 0)."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"gradient vectors differ in length: {x.size} vs {y.size}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0, True
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0)), False


def cosine_similarity(a, b) -> float:
    value, degenerate = cosine_with_flag(a, b)
    if degenerate:
        warnings.warn("cosine similarity with a zero vector is defined as 0", DegenerateCosineWarning, stacklevel=2)
    return value


# ---------------------------------------------------------------- interference probes


@dataclass(frozen=True)
class InterferenceProbe:
    og_layer: int = 1
    og_op: int = 0
    m: int = 1
    repeats: int = 10
    batch_size: int = 16

    def validate(self, space: SearchSpace) -> "InterferenceProbe":
        n = space.num_layers
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not 1 <= self.og_layer < n:
            raise ValueError(f"og_layer must lie in [1, {n - 1}] so a later layer can vary")
        if self.og_layer + self.m > n:
            raise ValueError(f"og_layer {self.og_layer} + m {self.m} exceeds {n} layers")
        if not 0 <= self.og_op < space.num_ops:
            raise ValueError(f"og_op {self.og_op} outside [0, {space.num_ops})")
        return self

    @property
    def differing_layers(self) -> list[int]:
        return list(range(self.og_layer + 1, self.og_layer + self.m + 1))


@dataclass
class SimilarityMatrix:
    labels: list
    values: np.ndarray
    degenerate: int = 0

    def validate(self, atol: float = 0.0) -> "SimilarityMatrix":
        v = self.values
        c = len(self.labels)
        if v.shape != (c, c):
            raise ValueError(f"matrix shape {v.shape} does not match {c} labels")
        if not np.array_equal(v, v.T) and not np.allclose(v, v.T, atol=atol, rtol=0):
            raise ValueError("similarity matrix is not symmetric")
        if not np.all(np.diag(v) == 1.0):
            raise ValueError("similarity matrix diagonal is not 1")
        if np.any(np.abs(v) > 1.0):
            raise ValueError("similarity values outside [-1, 1]")
        return self

    def off_diagonal_mean(self) -> float:
        c = len(self.labels)
        return float((self.values.sum() - np.trace(self.values)) / (c * c - c))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["", *self.labels])
            for label, row in zip(self.labels, self.values):
                w.writerow([label, *(f"{x:.4f}" for x in row)])
        return path

    @classmethod
    def from_csv(cls, path) -> "SimilarityMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        labels = rows[0][1:]
        values = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        return cls(labels, values)


def probe_batch(task: TaskSpec, batch_size: int, seed: int = 0) -> Batch:
    """A fixed batch shared by every child of an experiment."""
    return gen_batch(task, np.random.default_rng([seed, 23]), batch_size)


def probe_children(space: SearchSpace, probe: InterferenceProbe, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """C children sharing every layer except j+1..j+m.

    Child i carries candidate i at layer j+1; each further differing layer uses
    a random permutation, so every pair of children differs on all m layers.
    Remaining layers come from one random assignment shared by all children.
    """
    probe.validate(space)
    n, c = space.num_layers, space.num_ops
    base = rng.integers(0, c, size=n)
    base[probe.og_layer - 1] = probe.og_op
    differing = probe.differing_layers
    columns = {differing[0] - 1: np.arange(c)}
    for layer in differing[1:]:
        columns[layer - 1] = rng.permutation(c)
    children = []
    for i in range(c):
        child = base.copy()
        for layer, ops in columns.items():
            child[layer] = ops[i]
        children.append(tuple(int(x) for x in child))
    return children


def og_gradient(net: SuperNet, child, batch: Batch, og_layer: int) -> GradientVector:
    key = (og_layer - 1, child[og_layer - 1])
    res = path_loss_and_grads(net, child, batch)
    return flatten_gradients(res.grads[key], source=(tuple(child), key))


def _require_frozen(net: SuperNet) -> None:
    if not net.frozen:
        raise RuntimeError("interference analysis requires a frozen super-net")


def similarity_matrix(net: SuperNet, probe: InterferenceProbe, batch: Batch, children=None,
                      rng: np.random.Generator | None = None) -> SimilarityMatrix:
    """Pairwise cosine similarity of o_g gradients from the probe's C children."""
    _require_frozen(net)
    probe.validate(net.space)
    if children is None:
        children = probe_children(net.space, probe, rng if rng is not None else np.random.default_rng(0))
    grads = [og_gradient(net, ch, batch, probe.og_layer) for ch in children]
    c = len(children)
    values = np.eye(c)
    degenerate = 0
    for i in range(c):
        for j in range(i + 1, c):
            v, flag = cosine_with_flag(grads[i], grads[j])
            degenerate += flag
            values[i, j] = values[j, i] = v
    first = probe.differing_layers[0] - 1
    labels = [net.space.candidates[ch[first]].name for ch in children]
    return SimilarityMatrix(labels, values, degenerate)


def mean_similarity(net: SuperNet, og_layer: int, m: int, repeats: int, batch: Batch,
                    rng: np.random.Generator) -> tuple[float, list[float]]:
    """Average off-diagonal similarity over ``repeats`` random probes (random o_g, fixed layers, permutations)."""
    values = []
    for _ in range(repeats):
        probe = InterferenceProbe(og_layer=og_layer, og_op=int(rng.integers(net.space.num_ops)), m=m,
                                  repeats=repeats, batch_size=batch.size)
        children = probe_children(net.space, probe, rng)
        values.append(similarity_matrix(net, probe, batch, children).off_diagonal_mean())
    return float(np.mean(values)), values


def interference_vs_m(net: SuperNet, og_layer: int, m_range: Sequence[int], repeats: int, batch: Batch,
                      seed: int = 0) -> list[tuple[int, float]]:
    """Mean off-diagonal similarity for each m."""
    _require_frozen(net)
    out = []
    for m in m_range:
        rng = np.random.default_rng([seed, og_layer, m, 29])
        out.append((int(m), mean_similarity(net, og_layer, m, repeats, batch, rng)[0]))
    return out


def og_layer_sweep(net: SuperNet, layers: Sequence[int], m: int, repeats: int, batch: Batch,
                   seed: int = 0) -> dict[int, list[tuple[int, float]]]:
    """One m-curve (1..m, truncated at the last layer) per probed layer j."""
    _require_frozen(net)
    n = net.space.num_layers
    out = {}
    for j in layers:
        if not 1 <= j < n:
            raise ValueError(f"cannot probe layer {j}: no later layer to vary in a {n}-layer net")
        out[int(j)] = interference_vs_m(net, j, range(1, min(m, n - j) + 1), repeats, batch, seed)
    return out


def write_curve_csv(curve: Sequence[tuple[int, float]], path, header=("m", "mean_similarity")) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for m, v in curve:
            w.writerow([m, f"{v:.6f}"])
    return path


# ---------------------------------------------------------------- rank correlation


def _pair_counts(x: np.ndarray, y: np.ndarray) -> tuple[int, int, int, int]:
    """(concordant - discordant, pairs, x-tied pairs, y-tied pairs) with integer arithmetic."""
    iu = np.triu_indices(x.size, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu].astype(np.int64)
    sy = np.sign(y[:, None] - y[None, :])[iu].astype(np.int64)
    return int(np.dot(sx, sy)), int(iu[0].size), int((sx == 0).sum()), int((sy == 0).sum())


def tau_b_from_counts(s: int, n0: int, n1: int, n2: int) -> float:
    """Tie-corrected tau; 0 when either list is constant."""
    denom = (n0 - n1) * (n0 - n2)
    if denom == 0:
        return 0.0
    return float(s / math.sqrt(denom))


def kendall_tau(proxy: Sequence[float], truth: Sequence[float]) -> float:
    """Kendall's tau-b between two score lists."""
    x = np.asarray(proxy, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("proxy and truth must be equal-length 1-D lists")
    if x.size < 2:
        raise ValueError("kendall_tau needs at least two items")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("scores must be finite")
    return tau_b_from_counts(*_pair_counts(x, y))


@dataclass
class RankReport:
    children: list
    proxy: list
    truth: list
    tau: float
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.children) == len(self.proxy) == len(self.truth):
            raise ValueError("children, proxy and truth must have equal length")
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError(f"tau {self.tau} outside [-1, 1]")

    def to_json(self) -> str:
        d = asdict(self)
        d["children"] = [list(c) for c in self.children]
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> "RankReport":
        d = json.loads(Path(path).read_text())
        d["children"] = [tuple(c) for c in d["children"]]
        return cls(**d)


def sample_distinct_children(space: SearchSpace, count: int, seed: int) -> list[tuple[int, ...]]:
    """``count`` distinct uniformly drawn children (order of first draw)."""
    if count > space.size:
        raise ValueError(f"cannot draw {count} distinct children from {space.size}")
    rng = np.random.default_rng([seed, 37])
    out, seen = [], set()
    while len(out) < count:
        child = tuple(int(i) for i in rng.integers(0, space.num_ops, size=space.num_layers))
        if child not in seen:
            seen.add(child)
            out.append(child)
    return out


def _standalone_job(args):
    space, child, task, cfg = args
    return train_standalone(space, child, task, cfg)[1]


def ground_truth(space: SearchSpace, children, task: TaskSpec, cfg: StandaloneConfig, jobs: int = 1) -> list[float]:
    """Standalone metric per child; results do not depend on ``jobs``."""
    work = [(space, tuple(c), task, cfg) for c in children]
    if jobs <= 1:
        return [_standalone_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_standalone_job, work))


def rank_experiment(net: SuperNet, children, task: TaskSpec, standalone_cfg: StandaloneConfig,
                    val_set: list[Batch], truth: Sequence[float] | None = None, jobs: int = 1,
                    config: dict | None = None) -> RankReport:
    """Correlate shared-weight proxies with standalone ground truth."""
    children = [tuple(c) for c in children]
    if len(children) < 2:
        raise ValueError("rank_experiment needs at least two children")
    if len(set(children)) != len(children):
        raise ValueError("children must be distinct")
    proxy = [evaluate_proxy(net, c, val_set) for c in children]
    if truth is None:
        truth = ground_truth(net.space, children, task, standalone_cfg, jobs)
    truth = [float(t) for t in truth]
    return RankReport(children, proxy, truth, kendall_tau(proxy, truth), config or {})
