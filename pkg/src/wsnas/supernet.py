"""Chain-style weight-sharing super-net.

One parameter block per (layer, candidate) slot plus a shared embedding and
output head. A child model is a tuple of operator indices, one per layer, and
runs as a single path through those blocks.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from . import optim
from .alignment import AlignmentConfig, alignment_loss
from .autodiff import NonFiniteError, Tensor
from .operators import SearchSpace, apply_operator, init_params, truncated_normal
from .tasks import Batch

BlockKey = Union[str, tuple[int, int]]
ChildModel = tuple[int, ...]
HiddenTrace = list

CHECKPOINT_FORMAT = "wsnas-checkpoint/1"


class FrozenError(RuntimeError):
    pass


def validate_child(space: SearchSpace, child) -> ChildModel:
    child = tuple(int(i) for i in child)
    if len(child) != space.num_layers:
        raise ValueError(f"child has {len(child)} layers, space has {space.num_layers}")
    for layer, op in enumerate(child):
        if not 0 <= op < space.num_ops:
            raise ValueError(f"layer {layer}: operator index {op} outside [0, {space.num_ops})")
    return child


def _shared_blocks(space: SearchSpace, seed: int) -> dict[BlockKey, dict[str, np.ndarray]]:
    d, v, n = space.hidden, space.vocab, space.seq_len
    rng = np.random.default_rng([seed, 1_000_003])
    return {
        "embed": {"tok": truncated_normal(rng, (v, d)), "pos": truncated_normal(rng, (n, d)),
                  "ln_g": np.ones(d), "ln_b": np.zeros(d)},
        "head": {"w": truncated_normal(rng, (d, v)), "b": np.zeros(v)},
    }


class _PathModel:
    """Parameter store shared by the super-net and standalone children."""

    space: SearchSpace
    blocks: dict[BlockKey, dict[str, np.ndarray]]
    frozen: bool = False

    def slot(self, layer: int, op: int) -> dict[str, np.ndarray]:
        return self.blocks[(layer, op)]

    def path_keys(self, child: ChildModel) -> list[BlockKey]:
        return ["embed", *((l, o) for l, o in enumerate(child)), "head"]

    def freeze(self):
        self.frozen = True
        return self

    def unfreeze(self):
        self.frozen = False
        return self

    def state_copy(self) -> dict[BlockKey, dict[str, np.ndarray]]:
        return {k: {n: a.copy() for n, a in b.items()} for k, b in self.blocks.items()}


class SuperNet(_PathModel):
    def __init__(self, space: SearchSpace, seed: int = 0):
        self.space = space
        self.seed = seed
        self.frozen = False
        self.blocks = _shared_blocks(space, seed)
        for layer in range(space.num_layers):
            for op, spec in enumerate(space.candidates):
                self.blocks[(layer, op)] = init_params(spec, [seed, layer, op])

    @property
    def weights(self) -> dict[tuple[int, int], dict[str, np.ndarray]]:
        return {k: b for k, b in self.blocks.items() if isinstance(k, tuple)}

    def check_child(self, child) -> ChildModel:
        return validate_child(self.space, child)


class ChildNet(_PathModel):
    """A single architecture with its own copy of path weights."""

    def __init__(self, space: SearchSpace, child, blocks=None, seed: int = 0):
        self.space = space
        self.child = validate_child(space, child)
        self.seed = seed
        self.frozen = False
        if blocks is None:
            blocks = _shared_blocks(space, seed)
            for layer, op in enumerate(self.child):
                blocks[(layer, op)] = init_params(space.candidates[op], [seed, layer, op])
        self.blocks = blocks

    def check_child(self, child=None) -> ChildModel:
        child = self.child if child is None else validate_child(self.space, child)
        if child != self.child:
            raise ValueError(f"standalone model is {self.child}, cannot run {child}")
        return child


def extract_child(net: SuperNet, child) -> ChildNet:
    child = net.check_child(child)
    keys = net.path_keys(child)
    return ChildNet(net.space, child, blocks=copy.deepcopy({k: net.blocks[k] for k in keys}), seed=net.seed)


# ---------------------------------------------------------------- execution


def _leaves(model: _PathModel, keys, trainable: bool) -> dict[BlockKey, dict[str, Tensor]]:
    make = ad.parameter if trainable else ad.constant
    return {k: {n: make(a) for n, a in model.blocks[k].items()} for k in keys}


def _run(space: SearchSpace, p: dict, child: ChildModel, batch: Batch) -> tuple[Tensor, list[Tensor]]:
    if batch.tokens.shape[1] != space.seq_len:
        raise ad.ShapeError(f"batch length {batch.tokens.shape[1]} != space seq_len {space.seq_len}")
    e = p["embed"]
    h = ad.add(ad.embedding(batch.tokens, e["tok"]), e["pos"])
    h = ad.layer_norm(h, e["ln_g"], e["ln_b"])
    pad = None if batch.pad_mask.all() else batch.pad_mask
    trace = []
    for layer, op in enumerate(child):
        h = apply_operator(space.candidates[op], p[(layer, op)], h, pad)
        trace.append(h)
    return ad.linear(h, p["head"]["w"], p["head"]["b"]), trace


def forward_path(model: _PathModel, child, batch: Batch, capture: bool = False):
    """Logits (B, L, V) of ``child``, plus its per-layer hidden states if ``capture``."""
    child = model.check_child(child)
    logits, trace = _run(model.space, _leaves(model, model.path_keys(child), False), child, batch)
    return logits.data, ([h.data for h in trace] if capture else None)


def prediction_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Masked-token cross-entropy averaged over masked positions.

    A batch without masked positions has no defined loss and raises ValueError.
    """
    if not batch.mask.any():
        raise ValueError("batch has no masked positions to predict")
    return ad.cross_entropy(logits, np.where(batch.mask, batch.targets, 0), batch.mask)


@dataclass
class AlignTarget:
    """Constant hidden states to pull the trained path toward."""

    trace: list
    cfg: AlignmentConfig


@dataclass
class PathResult:
    loss: float
    pred_loss: float
    align_loss: float
    grads: dict
    trace: list


def path_loss_and_grads(model: _PathModel, child, batch: Batch, align: AlignTarget | None = None,
                        batch_id: int | None = None) -> PathResult:
    """Loss and gradients for every block on the path (embedding and head included).

    With ``align`` the objective is pred + lam * alignment; the target trace is
    held constant.
    """
    child = model.check_child(child)
    keys = model.path_keys(child)
    p = _leaves(model, keys, True)
    logits, trace = _run(model.space, p, child, batch)
    pred = prediction_loss(logits, batch)
    loss, align_value = pred, 0.0
    if align is not None:
        term = alignment_loss(align.trace, trace, align.cfg)
        align_value = float(term.data) if isinstance(term, Tensor) else float(term)
        if align.cfg.lam != 0.0:
            loss = ad.add(pred, ad.scale(term, align.cfg.lam))
    if not np.isfinite(loss.data):
        where = "" if batch_id is None else f" on batch {batch_id}"
        raise NonFiniteError(f"non-finite loss{where} for child {child}")
    ad.backward(loss)
    grads = {}
    for k in keys:
        grads[k] = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in p[k].items()}
    return PathResult(float(loss.data), float(pred.data), align_value, grads, [h.data for h in trace])


def apply_update(model: _PathModel, grads: dict, optimizer, lr: float | None = None) -> None:
    """Step only the blocks present in ``grads``."""
    if model.frozen:
        raise FrozenError("super-net is frozen; updates are not permitted")
    for key, g in grads.items():
        optimizer.step(key, model.blocks[key], g, lr)


# ---------------------------------------------------------------- persistence


def _tensor_name(key: BlockKey, name: str) -> str:
    return f"{key}.{name}" if isinstance(key, str) else f"L{key[0]}.O{key[1]}.{name}"


def _parse_tensor_name(full: str) -> tuple[BlockKey, str]:
    head, name = full.rsplit(".", 1)
    if head.startswith("L") and ".O" in head:
        layer, op = head[1:].split(".O")
        return (int(layer), int(op)), name
    return head, name


def _block_order(blocks) -> list[BlockKey]:
    return sorted(blocks, key=lambda k: (0, k, 0) if isinstance(k, str) else (1, "", k))


def save_checkpoint(model: _PathModel, path, optimizer=None, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    arrays = [(_tensor_name(k, n), model.blocks[k][n]) for k in _block_order(model.blocks)
              for n in sorted(model.blocks[k])]
    opt_meta = None
    if optimizer is not None:
        opt_meta = optimizer.state_meta()
        arrays += [(f"opt:{name}", a) for name, a in optimizer.state_arrays().items()]
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": "child" if isinstance(model, ChildNet) else "supernet",
        "space": model.space.to_dict(),
        "seed": model.seed,
        "frozen": model.frozen,
        "child": list(model.child) if isinstance(model, ChildNet) else None,
        "optimizer": opt_meta,
        "extra": extra or {},
        "tensors": entries,
    }
    json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return json_path, bin_path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (model, optimizer or None, extra)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    space = SearchSpace.from_dict(manifest["space"])
    blocks: dict = {}
    opt_arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"]).astype(np.float64)
        a = a.reshape(entry["shape"])
        if entry["name"].startswith("opt:"):
            opt_arrays[entry["name"][4:]] = a
            continue
        key, name = _parse_tensor_name(entry["name"])
        blocks.setdefault(key, {})[name] = a
    if manifest["kind"] == "child":
        model = ChildNet(space, manifest["child"], blocks=blocks, seed=manifest["seed"])
    else:
        model = SuperNet.__new__(SuperNet)
        model.space, model.seed, model.blocks = space, manifest["seed"], blocks
        expected = space.num_layers * space.num_ops + 2
        if len(blocks) != expected:
            raise ValueError(f"checkpoint holds {len(blocks)} blocks, space needs {expected}")
    model.frozen = bool(manifest["frozen"])
    opt = optim.from_meta(manifest["optimizer"], opt_arrays) if manifest["optimizer"] else None
    return model, opt, manifest["extra"]
