"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in call
order; :meth:`Tape.backward` replays them in reverse. Outside a tape every op
is a plain numpy computation, which is what inference paths use.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_SCHEMA = "lidartrack.params/1"


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations for one training step.

    Use as a context manager; a tape belongs to a single step and thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``params`` (zeros where unreached)."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        _TAPES[-1].nodes.append(_Node(out, inputs, backward))
        return out
    return Tensor(out_data)


def grad_enabled() -> bool:
    return bool(_TAPES)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _record(out, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    out = out + b.data
    return _record(out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def transpose(x: Tensor) -> Tensor:
    return _record(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], (x,), back)


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _record(x.data[..., start:stop], (x,), back)


def gather_rows_padded(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` at ``idx``; entries equal to -1 yield zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe] * valid[:, None]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, safe[valid], g[valid])
        return (gx,)

    return _record(out, (x,), back)


def segment_max(x: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Column-wise max over rows sharing a segment id.

    Every segment in ``range(n_segments)`` must own at least one row. The
    gradient flows to the first row attaining each maximum.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    order = np.argsort(seg, kind="stable")
    seg_sorted = seg[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    if len(starts) != n_segments:
        raise ContractError("segment_max: every segment needs at least one row")
    xs = x.data[order]
    out = np.maximum.reduceat(xs, starts, axis=0)
    n = xs.shape[0]
    hit = xs == out[seg_sorted]
    pos = np.where(hit, np.arange(n)[:, None], n)
    first = np.minimum.reduceat(pos, starts, axis=0)
    src_rows = order[first]
    cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[src_rows, cols] = g
        return (gx,)

    return _record(out, (x,), back)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- normalisation / attention


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(x.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (x, gamma, beta), back)


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise DimensionError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1,
              weights_out: list | None = None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_k)) V, split over ``n_heads`` column slices.

    ``q`` is M×d, ``k`` and ``v`` are N×d. Heads are concatenated back to
    M×d; projections are the caller's job. When ``weights_out`` is a list the
    H×M×N attention weights are appended to it.
    """
    m, d = q.shape
    n = k.shape[0]
    if k.shape[1] != d or v.shape[0] != n or d % n_heads:
        raise DimensionError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape}, heads {n_heads}")
    dv = v.shape[1]
    if dv % n_heads:
        raise DimensionError("attention: value width not divisible by head count")
    dk, dvh = d // n_heads, dv // n_heads
    s = 1.0 / math.sqrt(dk)
    qh = q.data.reshape(m, n_heads, dk).transpose(1, 0, 2)
    kh = k.data.reshape(n, n_heads, dk).transpose(1, 0, 2)
    vh = v.data.reshape(n, n_heads, dvh).transpose(1, 0, 2)
    a = softmax_array(np.matmul(qh, kh.transpose(0, 2, 1)) * s)
    oh = np.matmul(a, vh)
    if weights_out is not None:
        weights_out.append(a)

    def back(g):
        goh = g.reshape(m, n_heads, dvh).transpose(1, 0, 2)
        ga = np.matmul(goh, vh.transpose(0, 2, 1))
        gvh = np.matmul(a.transpose(0, 2, 1), goh)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * s
        gqh = np.matmul(gs, kh)
        gkh = np.matmul(gs.transpose(0, 2, 1), qh)
        return (gqh.transpose(1, 0, 2).reshape(m, d),
                gkh.transpose(1, 0, 2).reshape(n, d),
                gvh.transpose(1, 0, 2).reshape(n, dv))

    return _record(oh.transpose(1, 0, 2).reshape(m, dv), (q, k, v), back)


# ---------------------------------------------------------------- losses


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    # values already in range pass through bit-exact
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


def l1_loss(pred: Tensor, target: np.ndarray, weight=1.0, wrap: bool = False) -> Tensor:
    """Sum of ``weight * |pred - target|``; ``wrap`` measures angular distance."""
    diff = pred.data - np.asarray(target, dtype=np.float64)
    if wrap:
        diff = wrap_angle(diff)
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), diff.shape)
    sign = np.sign(diff) * w
    return _record(np.array((np.abs(diff) * w).sum()), (pred,), lambda g: (sign * float(g),))


def cross_entropy(logits: Tensor, targets: np.ndarray, class_weights=None) -> Tensor:
    """Class-weighted mean cross-entropy over rows of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    n, c = z.shape
    if n == 0:
        return Tensor(np.array(0.0))
    p = softmax_array(z)
    logp = np.log(p[np.arange(n), targets])
    cw = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    w = cw[targets]
    norm = w.sum()
    val = -(w * logp).sum() / norm

    def back(g):
        onehot = np.zeros_like(p)
        onehot[np.arange(n), targets] = 1.0
        return ((p - onehot) * (w / norm)[:, None] * float(g),)

    return _record(np.array(val), (logits,), back)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum(target * log softmax(logits))``."""
    z = logits.data
    n = z.shape[0]
    if n == 0:
        return Tensor(np.array(0.0))
    t = np.asarray(target_probs, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    val = -(t * logp).sum() / n

    def back(g):
        return ((p * t.sum(axis=-1, keepdims=True) - t) / n * float(g),)

    return _record(np.array(val), (logits,), back)


# ---------------------------------------------------------------- optimisation


class Adam:
    """Adam update over a fixed ordered list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * factor
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------- initialisation & checkpoints


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def params_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a flat JSON checkpoint; returns its content hash."""
    digest = params_digest(arrays)
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "sha256": digest,
        "meta": meta or {},
        "params": {
            name: {"shape": list(arrays[name].shape),
                   "values": np.asarray(arrays[name], dtype=np.float64).ravel().tolist()}
            for name in sorted(arrays)
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))
    return digest


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ContractError(f"{path}: unknown checkpoint schema {payload.get('schema')!r}")
    arrays = {name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
              for name, entry in payload["params"].items()}
    if params_digest(arrays) != payload["sha256"]:
        raise ContractError(f"{path}: content hash mismatch")
    return arrays, payload.get("meta", {})
