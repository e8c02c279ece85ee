"""Candidate operators: residual sublayers of attention, feed-forward and convolution type."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("MHA", "FFN", "CONV")
INIT_STD = 0.02


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    hidden: int
    heads: int = 0
    qkv_hidden: int = 0
    inner_hidden: int = 0
    kernel_size: int = 0
    separable: bool = True
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.hidden <= 0:
            raise ValueError("hidden size must be positive")
        if self.kind == "MHA":
            if self.heads <= 0 or self.qkv_hidden <= 0 or self.qkv_hidden % self.heads:
                raise ValueError(f"MHA needs qkv_hidden divisible by heads, got {self.qkv_hidden}/{self.heads}")
        elif self.kind == "FFN":
            if self.inner_hidden <= 0:
                raise ValueError("FFN needs a positive inner_hidden")
        elif self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ValueError(f"CONV kernel size must be odd and positive, got {self.kernel_size}")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "MHA":
            return f"MHA{self.heads}"
        if self.kind == "FFN":
            return "FFN"
        return f"CONV{self.kernel_size}"


def mha(hidden: int, heads: int, qkv_hidden: int | None = None, label: str = "") -> OperatorSpec:
    return OperatorSpec("MHA", hidden, heads=heads, qkv_hidden=qkv_hidden or hidden, label=label)


def ffn(hidden: int, inner_hidden: int, label: str = "") -> OperatorSpec:
    return OperatorSpec("FFN", hidden, inner_hidden=inner_hidden, label=label)


def conv(hidden: int, kernel_size: int, separable: bool = True, label: str = "") -> OperatorSpec:
    return OperatorSpec("CONV", hidden, kernel_size=kernel_size, separable=separable, label=label)


def table6_operators(hidden: int = 768) -> list[OperatorSpec]:
    """The six parameter-matched operators used for interference analysis."""
    return [
        mha(hidden, 6, 384),
        mha(hidden, 8, 384),
        ffn(hidden, 768),
        ffn(hidden, 832, label="FFN'"),
        conv(hidden, 3),
        conv(hidden, 5),
    ]


def desk_operators(hidden: int = 64, count: int = 4) -> list[OperatorSpec]:
    """Scaled-down hybrid sets: 4 -> {MHA4, FFN, CONV3, CONV5}; 6 adds MHA8 and FFN'."""
    q = hidden // 2
    if count == 4:
        return [mha(hidden, 4, q), ffn(hidden, hidden), conv(hidden, 3), conv(hidden, 5)]
    if count == 6:
        return [mha(hidden, 4, q), mha(hidden, 8, q), ffn(hidden, hidden),
                ffn(hidden, round(hidden * 832 / 768), label="FFN'"), conv(hidden, 3), conv(hidden, 5)]
    if count == 3:
        return [mha(hidden, 4, q), ffn(hidden, hidden), conv(hidden, 3)]
    raise ValueError(f"no desk operator set with {count} candidates")


@dataclass(frozen=True)
class SearchSpace:
    num_layers: int
    candidates: tuple[OperatorSpec, ...]
    hidden: int
    vocab: int
    seq_len: int

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if len(self.candidates) < 2:
            raise ValueError("need at least two candidate operators")
        names = [c.name for c in self.candidates]
        if len(set(names)) != len(names):
            raise ValueError(f"candidate names must be distinct: {names}")
        for c in self.candidates:
            if c.hidden != self.hidden:
                raise ValueError(f"{c.name} has hidden {c.hidden}, space uses {self.hidden}")

    @property
    def num_ops(self) -> int:
        return len(self.candidates)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.candidates]

    @property
    def size(self) -> int:
        return self.num_ops ** self.num_layers

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "vocab": self.vocab,
            "seq_len": self.seq_len,
            "candidates": [spec_to_dict(c) for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(d["num_layers"], tuple(OperatorSpec(**c) for c in d["candidates"]),
                   d["hidden"], d["vocab"], d["seq_len"])


def spec_to_dict(spec: OperatorSpec) -> dict:
    return {k: getattr(spec, k) for k in spec.__dataclass_fields__}


# ---------------------------------------------------------------- parameters


def param_shapes(spec: OperatorSpec) -> dict[str, tuple[int, ...]]:
    """Shapes of every trainable tensor, sublayer LayerNorm included."""
    d = spec.hidden
    shapes: dict[str, tuple[int, ...]]
    if spec.kind == "MHA":
        q = spec.qkv_hidden
        shapes = {"wq": (d, q), "bq": (q,), "wk": (d, q), "bk": (q,), "wv": (d, q), "bv": (q,),
                  "wo": (q, d), "bo": (d,)}
    elif spec.kind == "FFN":
        i = spec.inner_hidden
        shapes = {"w1": (d, i), "b1": (i,), "w2": (i, d), "b2": (d,)}
    elif spec.separable:
        shapes = {"dw": (spec.kernel_size, d), "dw_b": (d,), "pw1": (d, d), "pw1_b": (d,),
                  "pw2": (d, d), "pw2_b": (d,)}
    else:
        shapes = {"conv": (spec.kernel_size, d, d), "conv_b": (d,), "pw": (d, d), "pw_b": (d,)}
    shapes["ln_g"] = (d,)
    shapes["ln_b"] = (d,)
    return shapes


def param_count(spec: OperatorSpec) -> int:
    """Projection weights and biases of the sublayer; the 2d LayerNorm scalars are not counted."""
    return sum(math.prod(s) for k, s in param_shapes(spec).items() if not k.startswith("ln_"))


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def init_params(spec: OperatorSpec, seed) -> dict[str, np.ndarray]:
    """Weights ~ truncated normal(0.02), biases 0, LayerNorm gain 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name == "ln_g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = truncated_normal(rng, shape)
    return params


# ---------------------------------------------------------------- forward


def _attention(spec: OperatorSpec, p, h: Tensor, pad_mask) -> Tensor:
    b, n, _ = h.shape
    heads, q = spec.heads, spec.qkv_hidden
    dh = q // heads

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    qh = split(ad.linear(h, p["wq"], p["bq"]))
    kh = split(ad.linear(h, p["wk"], p["bk"]))
    vh = split(ad.linear(h, p["wv"], p["bv"]))
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)[:, None, None, :]
    ctx = ad.matmul(ad.softmax(scores, mask), vh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, q))
    return ad.linear(ctx, p["wo"], p["bo"])


def _feed_forward(p, h: Tensor) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(h, p["w1"], p["b1"])), p["w2"], p["b2"])


def _conv(spec: OperatorSpec, p, h: Tensor, pad_mask) -> Tensor:
    x = h if pad_mask is None else ad.mul(h, np.asarray(pad_mask, dtype=np.float64)[..., None])
    if spec.separable:
        x = ad.depthwise_conv1d(x, p["dw"], p["dw_b"])
        x = ad.gelu(ad.pointwise_conv1d(x, p["pw1"], p["pw1_b"]))
        return ad.pointwise_conv1d(x, p["pw2"], p["pw2_b"])
    x = _dense_conv1d(x, p["conv"], p["conv_b"])
    return ad.pointwise_conv1d(ad.gelu(x), p["pw"], p["pw_b"])


def _dense_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    r = w.shape[0] // 2
    out = None
    for t in range(w.shape[0]):
        term = ad.matmul(ad.shift(x, t - r), ad.take(w, t))
        out = term if out is None else ad.add(out, term)
    return ad.add(out, b)


def sublayer(spec: OperatorSpec, params, h: Tensor, pad_mask=None) -> Tensor:
    if spec.kind == "MHA":
        return _attention(spec, params, h, pad_mask)
    if spec.kind == "FFN":
        return _feed_forward(params, h)
    return _conv(spec, params, h, pad_mask)


def apply_operator(spec: OperatorSpec, params, h, pad_mask=None) -> Tensor:
    """LayerNorm(H + Sublayer(H)) for a (B, L, d) input."""
    h = h if isinstance(h, Tensor) else ad.constant(h)
    if h.data.ndim != 3 or h.shape[-1] != spec.hidden:
        raise ad.ShapeError(f"{spec.name}: expected (B, L, {spec.hidden}) input, got {h.shape}")
    p = {k: v if isinstance(v, Tensor) else ad.constant(v) for k, v in params.items()}
    missing = set(param_shapes(spec)) - set(p)
    if missing:
        raise ad.ShapeError(f"{spec.name}: missing parameters {sorted(missing)}")
    return ad.layer_norm(ad.add(h, sublayer(spec, p, h, pad_mask)), p["ln_g"], p["ln_b"])
