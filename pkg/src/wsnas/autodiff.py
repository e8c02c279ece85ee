"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive returns a :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. Tensors are
numbered at creation, so creation order is a valid topological order and the
backward sweep simply visits reachable nodes by descending id.

All arithmetic is float64.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import ndtr

log = logging.getLogger(__name__)

_ids = itertools.count()

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_NEG_BIG = -1e30


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id", "name")

    def __init__(self, data, requires_grad: bool = False, *, name: str | None = None,
                 parents: tuple = (), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) and not x.requires_grad else Tensor(_data(x))


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(x.data)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward_fn, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (),
                  backward_fn=backward_fn if req else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = ndtr(x)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), back, "gelu")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a: Tensor, index: int) -> Tensor:
    """``a[index]`` along the leading axis."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _node(a.data[index], (a,), back, "take")


def shift(a: Tensor, offset: int) -> Tensor:
    """``y[:, i] = a[:, i + offset]`` along axis 1, zero outside the range."""
    n = a.shape[1]
    out = np.zeros_like(a.data)
    lo, hi = max(0, -offset), min(n, n - offset)
    out[:, lo:hi] = a.data[:, lo + offset:hi + offset]

    def back(g):
        ga = np.zeros_like(g)
        ga[:, lo + offset:hi + offset] = g[:, lo:hi]
        return (ga,)

    return _node(out, (a,), back, "shift")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(total(a), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with either a 2-D right operand (shared weights) or matching batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if b.data.ndim == 2:
        def back(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def back(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    out = x.data @ w.data + b.data
    n_in = w.shape[0]

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ w.data.T, x.data.reshape(-1, n_in).T @ g2, g2.sum(axis=0)

    return _node(out, (x, w, b), back, "linear")


#: a 1x1 convolution over a (batch, length, channels) sequence is a linear map per position
pointwise_conv1d = linear


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel convolution along the length axis with zero 'same' padding.

    ``x`` is (B, L, d); ``w`` is (k, d) with odd k; ``b`` is (d,).
    out[:, i, c] = sum_t w[t, c] * x[:, i + t - k//2, c] + b[c]
    """
    if x.data.ndim != 3 or w.data.ndim != 2 or w.shape[1] != x.shape[2] or b.shape != (x.shape[2],):
        raise ShapeError(f"depthwise_conv1d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size must be odd, got {k}")
    r = k // 2
    n = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (r, r), (0, 0)))
    out = np.broadcast_to(b.data, x.shape).copy()
    for t in range(k):
        out += w.data[t] * xp[:, t:t + n]

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for t in range(k):
            gxp[:, t:t + n] += g * w.data[t]
            gw[t] = np.einsum("bld,bld->d", g, xp[:, t:t + n])
        return gxp[:, r:r + n], gw, g.sum(axis=(0, 1))

    return _node(out, (x, w, b), back, "depthwise_conv1d")


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), back, "embedding")


# ---------------------------------------------------------------- normalisation


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get zero weight."""
    x = a.data if mask is None else np.where(mask, a.data, _NEG_BIG)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------- losses


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _node(np.asarray((diff * diff).mean()), (a, b), back, "mse")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Softmax cross-entropy averaged over positions with nonzero weight.

    ``logits`` is (..., V); ``targets`` holds class ids with shape logits.shape[:-1].
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: no positions carry weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    safe_t = np.where(w > 0, targets, 0)
    picked = np.take_along_axis(z, safe_t[..., None], axis=-1)[..., 0]
    loss = ((logsum - picked) * w).sum() / denom

    def back(g):
        p = np.exp(z - logsum[..., None])
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], -1) - 1.0, -1)
        return (p * (w / denom * g)[..., None],)

    return _node(np.asarray(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- engine


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    for t in wrt or ():
        t.grad = None
    if not loss.requires_grad:
        return
    seen = {loss.id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t.id, reverse=True)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node.backward_fn is None or node.grad is None:
            continue
        for p, gp in zip(node.parents, node.backward_fn(node.grad)):
            if not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp
        if node.parents:
            node.grad = None  # free intermediate memory


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest-created tensor upstream of ``root`` holding a non-finite value."""
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    for node in sorted(seen.values(), key=lambda t: t.id):
        if not np.isfinite(node.data).all():
            return node
    return None


def check_finite(t: Tensor, what: str = "output") -> None:
    if np.isfinite(t.data).all():
        return
    bad = first_nonfinite(t)
    where = f"node {bad.id} ({bad.op})" if bad is not None else f"node {t.id} ({t.op})"
    raise NonFiniteError(f"non-finite {what} first produced at {where}", bad.id if bad else t.id)


# ---------------------------------------------------------------- graph wrapper


BuildFn = Callable[[Mapping[str, Tensor], Mapping[str, np.ndarray]], Mapping[str, Tensor]]


class Graph:
    """A differentiable program: a build function over named parameters.

    ``build(params, inputs)`` receives parameter leaves and raw input arrays and
    returns named output tensors. Each :meth:`forward` records a fresh tape.
    """

    def __init__(self, build: BuildFn, params: Mapping[str, np.ndarray]):
        self.build = build
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._leaves: dict[str, Tensor] = {}
        self._outputs: dict[str, Tensor] = {}

    def forward(self, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}
        outs = self.build(self._leaves, inputs)
        self._outputs = dict(outs)
        for name, t in self._outputs.items():
            check_finite(t, f"output {name!r}")
        return {k: t.data for k, t in self._outputs.items()}

    def backward(self, loss: str) -> dict[str, np.ndarray]:
        if loss not in self._outputs:
            raise KeyError(f"no output named {loss!r}; run forward first")
        backward(self._outputs[loss], wrt=self._leaves.values())
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._leaves.items()}


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return graph.forward(inputs)


def gradients(graph: Graph, loss: str = "loss") -> dict[str, np.ndarray]:
    return graph.backward(loss)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); 0 when both vanish."""
    if analytic == 0.0 and numeric == 0.0:
        return 0.0
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(graph: Graph, inputs: Mapping[str, np.ndarray], loss: str = "loss",
               step: float = 1e-5, floor: float = 1e-6, tolerance: float | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Every scalar of every parameter is perturbed by +/- ``step``. Magnitudes
    below ``floor`` are not trusted as denominators (finite differences carry
    roughly 1e-11 absolute noise in float64).
    """
    graph.forward(inputs)
    analytic = graph.backward(loss)
    worst, worst_at = 0.0, None
    for name, value in graph.params.items():
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(graph.forward(inputs)[loss])
            flat[i] = orig - step
            down = float(graph.forward(inputs)[loss])
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = relative_error(float(analytic[name].reshape(-1)[i]), numeric, floor)
            if err > worst:
                worst, worst_at = err, (name, i)
    if tolerance is not None and worst > tolerance:
        log.warning("gradient check: relative error %.3g at %s exceeds %.3g", worst, worst_at, tolerance)
    return worst


@dataclass(frozen=True)
class GradientVector:
    """Flattened operator gradient, parameters in sorted-name order, each row-major."""

    values: np.ndarray
    source: tuple = ()

    def __len__(self) -> int:
        return self.values.size


def flatten_gradients(grads: Mapping[str, np.ndarray], source: tuple = ()) -> GradientVector:
    if not grads:
        return GradientVector(np.zeros(0), source)
    return GradientVector(np.concatenate([np.ravel(grads[k]) for k in sorted(grads)]), source)
