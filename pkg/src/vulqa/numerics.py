"""Dense tensors with reverse-mode gradients, transformer ops and AdamW.

Every op takes and returns :class:`Tensor`. Backward closures return one
gradient per parent; the engine in :meth:`Tensor.backward` sums them and
accumulates into leaf ``.grad`` buffers (callers zero between steps).
Broadcasting is limited to suffix shapes, i.e. bias addition.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateBatchError, DimensionError, InputError, OptimizerError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the backward graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise InputError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise InputError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class Parameter(Tensor):
    """Named model weight; ``trainable`` decides whether the optimizer touches it."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_suffix(a_shape, b_shape, op: str) -> None:
    if len(b_shape) > len(a_shape) or tuple(a_shape[len(a_shape) - len(b_shape):]) != tuple(b_shape):
        raise DimensionError(f"{op}: shape {tuple(b_shape)} is not a suffix of {tuple(a_shape)}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "add")
    b_shape = b.shape

    def backward(g):
        return g, _reduce_to(g, b_shape)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce_to(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InputError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    x2d = xd.reshape(-1, xd.shape[-1])
    out = (x2d @ wd.T).reshape(xd.shape[:-1] + (wd.shape[0],))
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {wd.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2d if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _result(out, parents, backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; also used to splice code and text rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"ids out of range [0, {table.shape[0]})")
    n_rows, width = table.shape

    def backward(g):
        gt = np.zeros((n_rows, width), dtype=g.dtype)
        np.add.at(gt, ids.ravel(), g.reshape(-1, width))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


take_rows = embedding_lookup


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise InputError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] == 0:
        raise InputError("layer_norm over an empty axis")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError("layer_norm: gain/bias must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _reduce_to(g * xhat, (n,)) if gain.requires_grad else None
        gbias = _reduce_to(g, (n,)) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- attention


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1, causal: bool = True,
              key_mask=None) -> Tensor:
    """Multi-head scaled dot-product attention over (B, T, D) or (T, D) inputs.

    ``key_mask`` is boolean (B, T); False keys receive zero weight.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: q/k/v shapes differ {q.shape} {k.shape} {v.shape}")
    squeeze = q.ndim == 2
    qd, kd, vd = (t.data[None] if squeeze else t.data for t in (q, k, v))
    if qd.ndim != 3:
        raise DimensionError("attention expects (B, T, D) or (T, D)")
    bsz, seq, dim = qd.shape
    if seq == 0:
        raise InputError("attention over a zero-length sequence")
    if dim % n_heads:
        raise DimensionError(f"model dim {dim} not divisible by {n_heads} heads")
    dh = dim // n_heads
    sc = qd.dtype.type(1.0 / math.sqrt(dh))

    def split(a):
        return a.reshape(bsz, seq, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(qd), split(kd), split(vd)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * sc
    blocked = np.zeros((bsz, 1, seq, seq), dtype=bool)
    if causal:
        blocked = blocked | np.triu(np.ones((seq, seq), dtype=bool), 1)[None, None]
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool).reshape(bsz, seq)
        blocked = blocked | ~km[:, None, None, :]
    scores = np.where(blocked, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(bsz, seq, dim)
    if squeeze:
        out = out[0]

    def backward(g):
        gh = split(g[None] if squeeze else g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            a = a.transpose(0, 2, 1, 3).reshape(bsz, seq, dim)
            return a[0] if squeeze else a

        return merge(gq), merge(gk), merge(gv)

    return _result(out, (q, k, v), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, n_heads: int = 1) -> Tensor:
    return attention(q, k, v, n_heads=n_heads, causal=True, key_mask=mask)


# ---------------------------------------------------------------- losses & pooling


def cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token NLL over positions where ``loss_mask`` is true."""
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    targets = np.asarray(targets).reshape(-1)
    mask = np.asarray(loss_mask, dtype=bool).reshape(-1)
    if targets.shape[0] != flat.shape[0] or mask.shape[0] != flat.shape[0]:
        raise DimensionError("cross_entropy: logits, targets and mask lengths differ")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise DegenerateBatchError("loss mask has no true entries")
    tgt = targets[rows].astype(np.int64)
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise InputError("target id out of range")
    sel = flat[rows]
    shifted = sel - sel.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(rows.size), tgt]
    count = rows.size
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        probs = np.exp(shifted - logz[:, None])
        probs[np.arange(count), tgt] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = probs * (g / count)
        return (full.reshape(shape),)

    return _result(loss, (logits,), backward)


def mean_pool(x: Tensor, mask) -> Tensor:
    """Average (B, T, D) over T using boolean mask (B, T)."""
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:2]:
        raise DimensionError("mean_pool: mask must match the first two axes")
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise InputError("mean_pool over an all-padding row")
    w = m / counts

    def backward(g):
        return (g[:, None, :] * w[:, :, None],)

    return _result((x.data * w[:, :, None]).sum(axis=1), (x,), backward)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Iterable[Parameter], grads: Mapping[str, np.ndarray] | None,
               state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``grads`` maps parameter name to gradient; ``None`` reads ``param.grad``.
    Frozen parameters are skipped regardless of any gradient they hold.
    """
    params = list(params)
    updates = []
    for p in params:
        if not p.trainable:
            continue
        g = p.grad if grads is None else grads.get(p.name)
        if g is None:
            raise OptimizerError(f"no gradient for trainable parameter {p.name!r}")
        updates.append((p, np.asarray(g, dtype=p.dtype)))
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g in updates:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, params: Iterable[Parameter], lr: float = 2e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise OptimizerError("parameter names must be unique")
        self.state = AdamWState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        adamw_step(self.params, None, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    params = [p for p in params if p.trainable and p.grad is not None]
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * p.dtype.type(factor)
    return total


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckResult:
    rel_error: float
    coords: int
    analytic: np.ndarray
    numeric: np.ndarray


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], n_coords: int = 32, eps: float = 1e-6,
              seed: int = 0) -> GradCheckResult:
    """Compare backward() against central differences on random coordinates.

    Non-scalar outputs are reduced with a fixed random projection. The
    error is norm-wise over all sampled coordinates:
    ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    rng = np.random.default_rng(seed)
    out0 = fn(*inputs)
    proj = rng.standard_normal(out0.shape) if out0.ndim else None

    def scalar() -> Tensor:
        out = fn(*inputs)
        return out if proj is None else sum_all(mul(out, Tensor(proj.astype(out.dtype))))

    for t in inputs:
        t.grad = None
    scalar().backward()
    analytic, numeric = [], []
    diff_inputs = [t for t in inputs if t.requires_grad]
    if not diff_inputs:
        raise InputError("gradcheck needs at least one input with requires_grad")
    per_input = max(1, n_coords // len(diff_inputs))
    for t in diff_inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, min(per_input, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(scalar().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(scalar().data)
            flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(float(g.reshape(-1)[i]))
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return GradCheckResult(float(np.linalg.norm(a - n) / denom), a.size, a, n)
