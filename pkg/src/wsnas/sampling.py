"""Child-model samplers and exact convergence analysis of the gradual-change walk.

The gradual sampler replaces ``k`` operators of the previous child per step,
which is a random walk on the architecture graph (children adjacent when they
differ in one layer). Because the walk is symmetric under relabelling the
operators of any layer, its distribution from a point start is uniform inside
each Hamming shell around the start, so the whole curve can be computed on the
N+1 shell occupancies. A direct sparse C^N x C^N kernel is kept as a cross-check.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.stats import binom, hypergeom

UNIFORM = "uniform"
MAGIC_T = "magic_t"
EXACT_STATE_LIMIT = 100_000


class PeriodicChainError(ValueError):
    """Raised when a non-lazy single-swap walk is requested on two candidates."""


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = UNIFORM
    k: int = 1
    lazy: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (UNIFORM, MAGIC_T):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def validate(self, num_layers: int, num_ops: int) -> "SamplerConfig":
        if self.k > num_layers:
            raise ValueError(f"k={self.k} exceeds the number of layers {num_layers}")
        if self.mode == MAGIC_T and num_ops == 2 and not self.lazy:
            raise PeriodicChainError(
                "with two candidates a strict swap flips Hamming parity every step, so the walk "
                "never converges to uniform; use lazy=True")
        return self


def _alive_ops(alive, layer: int, num_ops: int) -> np.ndarray:
    return np.arange(num_ops) if alive is None else np.flatnonzero(alive[layer])


def sample_uniform(space, rng: np.random.Generator, alive=None) -> tuple[int, ...]:
    """Every layer independently uniform over its (alive) candidates."""
    n, c = space.num_layers, space.num_ops
    if alive is None:
        return tuple(int(i) for i in rng.integers(0, c, size=n))
    return tuple(int(rng.choice(_alive_ops(alive, l, c))) for l in range(n))


def sample_magic_t(prev, space, cfg: SamplerConfig, rng: np.random.Generator, alive=None) -> tuple[int, ...]:
    """Change ``k`` distinct layers of ``prev``.

    Strict mode (lazy=False) always picks a different operator, so the Hamming
    distance is exactly k; lazy mode draws from all candidates and may keep the
    current one. With an alive mask only alive operators are drawn, and only
    layers that have an alternative are eligible in strict mode.
    """
    n, c = space.num_layers, space.num_ops
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds the number of layers {n}")
    child = list(prev)
    if alive is None:
        eligible = np.arange(n)
    elif cfg.lazy:
        eligible = np.arange(n)
    else:
        eligible = np.array([l for l in range(n) if alive[l].sum() >= 2], dtype=int)
    k = min(cfg.k, eligible.size)
    if k == 0:
        return tuple(child)
    for layer in rng.choice(eligible, size=k, replace=False):
        ops = _alive_ops(alive, layer, c)
        if not cfg.lazy:
            ops = ops[ops != child[layer]]
        child[layer] = int(rng.choice(ops))
    return tuple(child)


class Sampler:
    """Stateful child sampler used by the trainers."""

    def __init__(self, space, cfg: SamplerConfig, rng: np.random.Generator | None = None, alive=None):
        self.space = space
        self.cfg = cfg.validate(space.num_layers, space.num_ops) if cfg.mode == MAGIC_T else cfg
        self.rng = rng if rng is not None else np.random.default_rng([cfg.seed, 17])
        self.alive = alive
        self.prev: tuple[int, ...] | None = None

    def next(self) -> tuple[int, ...]:
        if self.cfg.mode == UNIFORM or self.prev is None:
            child = sample_uniform(self.space, self.rng, self.alive)
        else:
            child = sample_magic_t(self.prev, self.space, self.cfg, self.rng, self.alive)
        self.prev = child
        return child

    def set_alive(self, alive) -> None:
        """Restrict future draws; layers of the chain state that died are redrawn uniformly."""
        self.alive = alive
        if self.prev is None or alive is None:
            return
        child = list(self.prev)
        for layer, op in enumerate(child):
            if not alive[layer, op]:
                child[layer] = int(self.rng.choice(np.flatnonzero(alive[layer])))
        self.prev = tuple(child)


def hamming(a, b) -> int:
    return sum(x != y for x, y in zip(a, b))


def expected_hamming_uniform(space) -> float:
    """Mean number of layers that differ between two independent uniform children."""
    n, c = _dims(space)
    return n * (c - 1) / c


def mixing_steps_for(epsilon: float, num_layers: int) -> int:
    """Steps t with N ln N + N ln(1/eps) <= t."""
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    n = num_layers
    return math.ceil(n * math.log(n) + n * math.log(1.0 / epsilon) - 1e-12)


def coupling_bound(t, num_layers: int):
    return num_layers * np.exp(-np.asarray(t, dtype=float) / num_layers)


def paper_bound(t, num_layers: int):
    """exp(-t/N - ln N), recorded for comparison only."""
    return np.exp(-np.asarray(t, dtype=float) / num_layers - math.log(num_layers))


def _dims(space) -> tuple[int, int]:
    if hasattr(space, "num_layers"):
        return space.num_layers, space.num_ops
    n, c = space
    return int(n), int(c)


def is_ergodic(num_ops: int, lazy: bool) -> bool:
    return lazy or num_ops >= 3


@dataclass
class MixingReport:
    num_layers: int
    num_ops: int
    lazy: bool
    k: int
    t: np.ndarray
    tv: np.ndarray
    exact: bool
    epsilon: float = 0.01
    ergodic: bool = True
    coupling: np.ndarray = field(init=False)
    paper: np.ndarray = field(init=False)

    def __post_init__(self):
        self.coupling = coupling_bound(self.t, self.num_layers)
        self.paper = paper_bound(self.t, self.num_layers)

    def holds(self, bound: np.ndarray, start: int = 1, slack: float = 1e-12) -> bool:
        sel = self.t >= start
        return bool(np.all(self.tv[sel] <= bound[sel] + slack))

    @property
    def coupling_bound_holds(self) -> bool:
        return self.holds(self.coupling)

    @property
    def paper_bound_holds(self) -> bool:
        return self.holds(self.paper)

    def tv_at(self, t: int) -> float:
        return float(self.tv[int(np.searchsorted(self.t, t))])

    def rows(self):
        for t, tv, cb, pb in zip(self.t, self.tv, self.coupling, self.paper):
            yield int(t), float(tv), float(cb), float(pb)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "tv", "coupling_bound", "paper_bound"])
            for t, tv, cb, pb in self.rows():
                w.writerow([t, repr(tv), repr(cb), repr(pb)])
        return path

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            return [{k: (int(v) if k == "t" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _flip_probs(num_ops: int, lazy: bool) -> tuple[float, float]:
    """(P[differing layer becomes matching], P[matching layer becomes differing]) when redrawn."""
    if lazy:
        return 1.0 / num_ops, (num_ops - 1) / num_ops
    return 1.0 / (num_ops - 1), 1.0


def shell_kernel(num_layers: int, num_ops: int, k: int, lazy: bool) -> np.ndarray:
    """(N+1)x(N+1) transition matrix of the Hamming distance to the start."""
    n = num_layers
    to_match, to_diff = _flip_probs(num_ops, lazy)
    kernel = np.zeros((n + 1, n + 1))
    for h in range(n + 1):
        for j in range(max(0, k - (n - h)), min(k, h) + 1):
            pj = hypergeom.pmf(j, n, h, k)
            if pj == 0:
                continue
            for a in range(j + 1):        # differing layers that come back to the start op
                pa = binom.pmf(a, j, to_match)
                for b in range(k - j + 1):  # matching layers that move away
                    pb = binom.pmf(b, k - j, to_diff)
                    kernel[h, h - a + b] += pj * pa * pb
    return kernel


def shell_sizes(num_layers: int, num_ops: int) -> np.ndarray:
    h = np.arange(num_layers + 1)
    return np.array([math.comb(num_layers, i) * (num_ops - 1) ** i for i in h], dtype=float)


def _state_kernel(num_layers: int, num_ops: int, k: int, lazy: bool) -> sparse.csr_matrix:
    """Explicit C^N x C^N transition matrix (row-stochastic)."""
    n, c = num_layers, num_ops
    states = np.arange(c ** n)
    digits = (states[:, None] // c ** np.arange(n)) % c
    rows, cols, vals = [], [], []
    layer_sets = list(itertools.combinations(range(n), k))
    choices = c if lazy else c - 1
    p = 1.0 / (len(layer_sets) * choices ** k)
    for layers in layer_sets:
        for offsets in itertools.product(range(0 if lazy else 1, c), repeat=k):
            new = digits.copy()
            for layer, off in zip(layers, offsets):
                new[:, layer] = (new[:, layer] + off) % c
            rows.append(states)
            cols.append(new @ (c ** np.arange(n)))
            vals.append(np.full(states.size, p))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(states.size, states.size))


def exact_mixing_curve(space, cfg: SamplerConfig, t_max: int, start=None, method: str = "shell",
                       epsilon: float = 0.01) -> MixingReport:
    """Exact total-variation distance to uniform for t = 0..t_max.

    ``method='shell'`` evolves Hamming-shell occupancies; ``method='kernel'``
    powers the full sparse transition matrix from ``start`` (default all-zeros).
    """
    n, c = _dims(space)
    if c ** n > EXACT_STATE_LIMIT:
        raise ValueError(f"{c}^{n} states exceed the exact limit {EXACT_STATE_LIMIT}; use monte_carlo_mixing")
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds the number of layers {n}")
    ts = np.arange(t_max + 1)
    tv = np.empty(t_max + 1)
    if method == "shell":
        kernel = shell_kernel(n, c, cfg.k, cfg.lazy)
        target = shell_sizes(n, c) / c ** n
        occ = np.zeros(n + 1)
        occ[0] = 1.0
        for t in ts:
            tv[t] = 0.5 * np.abs(occ - target).sum()
            occ = occ @ kernel
    elif method == "kernel":
        kernel = _state_kernel(n, c, cfg.k, cfg.lazy)
        size = c ** n
        start = tuple(start) if start is not None else (0,) * n
        dist = np.zeros(size)
        dist[int(np.dot(start, c ** np.arange(n)))] = 1.0
        kt = kernel.T.tocsr()
        for t in ts:
            tv[t] = 0.5 * np.abs(dist - 1.0 / size).sum()
            dist = kt @ dist
    else:
        raise ValueError(f"unknown method {method!r}")
    np.clip(tv, 0.0, 1.0, out=tv)
    return MixingReport(n, c, cfg.lazy, cfg.k, ts, tv, exact=True, epsilon=epsilon,
                        ergodic=is_ergodic(c, cfg.lazy))


def monte_carlo_mixing(space, cfg: SamplerConfig, t_max: int, walkers: int = 20_000, seed: int = 0,
                       epsilon: float = 0.01) -> MixingReport:
    """Estimate the curve by simulating independent walkers and histogramming shells."""
    n, c = _dims(space)
    rng = np.random.default_rng([seed, 31])
    to_match, to_diff = _flip_probs(c, cfg.lazy)
    differ = np.zeros((walkers, n), dtype=bool)
    target = shell_sizes(n, c) / float(c) ** n
    tv = np.empty(t_max + 1)
    for t in range(t_max + 1):
        hist = np.bincount(differ.sum(axis=1), minlength=n + 1) / walkers
        tv[t] = 0.5 * np.abs(hist - target).sum()
        chosen = np.argsort(rng.random((walkers, n)), axis=1)[:, :cfg.k]
        rows = np.repeat(np.arange(walkers), cfg.k)
        cols = chosen.ravel()
        was = differ[rows, cols]
        u = rng.random(rows.size)
        differ[rows, cols] = np.where(was, u >= to_match, u < to_diff)
    return MixingReport(n, c, cfg.lazy, cfg.k, np.arange(t_max + 1), tv, exact=False, epsilon=epsilon,
                        ergodic=is_ergodic(c, cfg.lazy))
