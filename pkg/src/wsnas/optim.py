"""Block-wise optimizers. State is keyed per parameter block so blocks that
sit out a step keep their moments and bias-correction clocks untouched."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SGD:
    lr: float = 0.1

    def step(self, key, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            params[name] -= lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def state_meta(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}


@dataclass
class Adam:
    """Adam with decoupled weight decay on matrices (biases and gains are not decayed)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def step(self, key, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        t = self.t.get(key, 0) + 1
        self.t[key] = t
        m = self.m.setdefault(key, {})
        v = self.v.setdefault(key, {})
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if name not in m:
                m[name] = np.zeros_like(g)
                v[name] = np.zeros_like(g)
            m[name] *= self.beta1
            m[name] += (1.0 - self.beta1) * g
            v[name] *= self.beta2
            v[name] += (1.0 - self.beta2) * g * g
            p = params[name]
            if self.weight_decay and p.ndim >= 2:
                p -= lr * self.weight_decay * p
            p -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key in sorted(self.m, key=str):
            for name in sorted(self.m[key]):
                out[f"m/{_key_str(key)}/{name}"] = self.m[key][name]
                out[f"v/{_key_str(key)}/{name}"] = self.v[key][name]
        return out

    def state_meta(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": {_key_str(k): n for k, n in sorted(self.t.items(), key=lambda kv: str(kv[0]))}}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = {_parse_key(k): n for k, n in meta["t"].items()}
        self.m, self.v = {}, {}
        for full, arr in arrays.items():
            which, key, name = full.split("/", 2)
            (self.m if which == "m" else self.v).setdefault(_parse_key(key), {})[name] = arr.copy()


def _key_str(key) -> str:
    return key if isinstance(key, str) else f"L{key[0]}.O{key[1]}"


def _parse_key(s: str):
    if s.startswith("L") and ".O" in s:
        layer, op = s[1:].split(".O")
        return int(layer), int(op)
    return s


def from_meta(meta: dict, arrays: dict[str, np.ndarray] | None = None):
    if meta["kind"] == "sgd":
        return SGD(lr=meta["lr"])
    opt = Adam(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
               weight_decay=meta["weight_decay"])
    opt.load_state(meta, arrays or {})
    return opt
