"""Hidden-state alignment losses and anchor bookkeeping."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BEST_SO_FAR = "best_so_far"
TOP_P = "top_p"


@dataclass(frozen=True)
class AlignmentConfig:
    lam: float = 0.5
    block_size: int = 4
    warm_start_epochs: int = 3
    all_layers: bool = False

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and non-negative")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")


def aligned_layers(num_layers: int, cfg: AlignmentConfig) -> list[int]:
    """0-based indices of the layers whose outputs are aligned.

    Block boundaries are layers b, 2b, ... (1-based); when b does not divide N
    the last layer closes the final partial block and is aligned too.
    """
    if cfg.all_layers:
        return list(range(num_layers))
    b = cfg.block_size
    layers = list(range(b - 1, num_layers, b))
    if num_layers % b:
        layers.append(num_layers - 1)
    return layers


def alignment_loss(anchor_trace: Sequence, child_trace: Sequence, cfg: AlignmentConfig):
    """Sum over aligned layers of the mean squared difference of hidden states.

    The anchor side is always treated as a constant. Returns a Tensor when the
    child trace is differentiable, otherwise a float.
    """
    if len(anchor_trace) != len(child_trace):
        raise ad.ShapeError(f"traces differ in depth: {len(anchor_trace)} vs {len(child_trace)}")
    differentiable = any(isinstance(h, Tensor) and h.requires_grad for h in child_trace)
    total = None
    for n in aligned_layers(len(child_trace), cfg):
        a = ad.constant(_values(anchor_trace[n]))
        c = child_trace[n] if isinstance(child_trace[n], Tensor) else ad.constant(child_trace[n])
        if a.shape != c.shape:
            raise ad.ShapeError(f"layer {n + 1}: anchor {a.shape} vs child {c.shape}")
        term = ad.mse(a, c)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.constant(0.0)
    return total if differentiable else float(total.data)


def combined_loss(pred_loss, align_loss, lam: float):
    """pred + lam * align; works on floats and Tensors."""
    if isinstance(pred_loss, Tensor) or isinstance(align_loss, Tensor):
        if lam == 0.0:
            return pred_loss
        return ad.add(pred_loss, ad.scale(_as_tensor(align_loss), lam))
    return pred_loss + lam * align_loss


def average_trace(traces: Sequence[Sequence]) -> list[np.ndarray]:
    """Layer-wise elementwise mean over a list of hidden traces."""
    if not traces:
        raise ValueError("average_trace needs at least one trace")
    depth = len(traces[0])
    if any(len(t) != depth for t in traces):
        raise ad.ShapeError("traces differ in depth")
    out = []
    for n in range(depth):
        layer = [_values(t[n]) for t in traces]
        if any(x.shape != layer[0].shape for x in layer):
            raise ad.ShapeError(f"layer {n + 1}: traces differ in shape")
        out.append(np.mean(layer, axis=0))
    return out


def _values(h) -> np.ndarray:
    return h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(x)


# ---------------------------------------------------------------- anchors


@dataclass(frozen=True)
class AnchorState:
    anchor: tuple[int, ...] | None = None
    val_score: float = float("-inf")
    policy: str = BEST_SO_FAR
    p: float = 30.0
    r: float = 10.0
    last_eval_epoch: int = -1

    def __post_init__(self):
        if self.policy not in (BEST_SO_FAR, TOP_P):
            raise ValueError(f"unknown anchor policy {self.policy!r}")
        if self.policy == TOP_P and not (0 < self.p < 100 and 0 < self.r < 100):
            raise ValueError("p and r must lie in (0, 100)")

    def to_dict(self) -> dict:
        return {"anchor": list(self.anchor) if self.anchor is not None else None, "val": self.val_score,
                "policy": self.policy, "p": self.p, "r": self.r, "last_eval_epoch": self.last_eval_epoch}


def maybe_replace_anchor(state: AnchorState, candidate, candidate_val: float, epoch: int | None = None) -> AnchorState:
    """Adopt ``candidate`` only on strict improvement; ties keep the incumbent."""
    epoch = state.last_eval_epoch if epoch is None else epoch
    if state.anchor is None or candidate_val > state.val_score:
        return replace(state, anchor=tuple(candidate), val_score=float(candidate_val), last_eval_epoch=epoch)
    return replace(state, last_eval_epoch=epoch)


def top_percentiles(vals: Sequence[float]) -> np.ndarray:
    """Percentile from the top: 100 * (1 + #strictly better) / n."""
    v = np.asarray(vals, dtype=np.float64)
    better = (v[None, :] > v[:, None]).sum(axis=1)
    return 100.0 * (better + 1) / v.size


def select_anchor_top_p(scored_pool: Sequence[tuple], state: AnchorState, epoch: int | None = None) -> AnchorState:
    """Keep the incumbent while it stays inside the top (p - r, p + r)% band.

    Otherwise switch to the pool member whose top-percentile is closest to p,
    preferring the higher score on ties.
    """
    if not scored_pool:
        raise ValueError("empty pool")
    epoch = state.last_eval_epoch if epoch is None else epoch
    children = [tuple(c) for c, _ in scored_pool]
    vals = [float(v) for _, v in scored_pool]
    pct = top_percentiles(vals)
    lo, hi = max(state.p - state.r, 0.0), min(state.p + state.r, 100.0)
    if state.anchor is not None and state.anchor in children:
        i = children.index(state.anchor)
        if lo <= pct[i] <= hi:
            return replace(state, val_score=vals[i], last_eval_epoch=epoch)
    best = min(range(len(children)), key=lambda i: (abs(pct[i] - state.p), -vals[i], i))
    return replace(state, anchor=children[best], val_score=vals[best], last_eval_epoch=epoch)


@dataclass
class AnchorLog:
    """JSONL record of anchor decisions."""

    records: list[dict] = field(default_factory=list)

    def add(self, epoch: int, state: AnchorState, replaced: bool) -> None:
        self.records.append({"epoch": epoch, "anchor": list(state.anchor) if state.anchor else None,
                             "val": state.val_score, "replaced": replaced, "policy": state.policy})

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
