"""Dense float64 tensors with a minimal reverse-mode tape.

A :class:`Tensor` wraps a numpy array. When at least one input of an op
lives on a :class:`GradientTape`, the op appends a node holding a closure
that maps the output gradient to input gradients. ``backward`` walks the
node list in reverse index order, so accumulation order is fixed and the
result is deterministic.

Broadcasting is deliberately narrow: equal shapes, a 0-d scalar against
any tensor, or a row vector over the last dimension. Anything else raises
:class:`DimensionError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, VocabIndexError

DTYPE = np.float64

# query rows per block when attention runs without a tape
ATTN_CHUNK = 128


@dataclass
class _Node:
    inputs: tuple
    backward: Optional[Callable]
    name: Optional[str] = None


@dataclass
class GradientTape:
    """Append-only record of tracked operations."""

    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)
    leaf_shapes: dict = field(default_factory=dict)

    def leaf(self, data, name) -> "Tensor":
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already registered")
        arr = np.array(data, dtype=DTYPE)
        self.nodes.append(_Node((), None, name))
        idx = len(self.nodes) - 1
        self.leaves[name] = idx
        self.leaf_shapes[name] = arr.shape
        return Tensor(arr, self, idx)

    def _record(self, out, inputs, backward) -> "Tensor":
        idx_inputs = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(idx_inputs, backward))
        return Tensor(out, self, len(self.nodes) - 1)


class Tensor:
    """A float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Optional[GradientTape] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self):
        t = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{t})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts) -> Optional[GradientTape]:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands live on different tapes")
            tape = t.tape
    return tape


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    return out


def _finish(op, out, inputs, backward) -> Tensor:
    _check_finite(out, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape._record(out, inputs, backward)


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "scalar_b"
    if a.data.ndim == 0:
        return "scalar_a"
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "row_b"
    if a.data.ndim == 1 and b.data.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "row_a"
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a, b, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _finish("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.tracked else None
        gb = _reduce_to(g * ad, bd.shape) if b.tracked else None
        return ga, gb

    return _finish("mul", out, (a, b), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _finish("silu", out, (x,), backward)


def total(x) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(x.data.sum()), (x,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(old),)

    return _finish("reshape", out, (x,), backward)


def take_rows(x, start: int, stop: int, axis: int = -2) -> Tensor:
    """Slice ``x[..., start:stop, ...]`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _finish("take_rows", x.data[idx].copy(), (x,), backward)


def concat(xs: Sequence, axis: int = -2) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if len(xs) == 1:
        return xs[0]
    ax = axis % xs[0].data.ndim
    sizes = [t.shape[ax] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _finish("concat", out, tuple(xs), backward)


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise VocabIndexError(f"token id out of range [0, {V})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _finish("embedding", out, (table,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading dims of ``a`` are treated as rows."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.tracked else None
        gb = None
        if b.tracked:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _finish("matmul", out, (a, b), backward)


def rmsnorm(x, weight, eps: float = 1e-6) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"rmsnorm: x {x.shape} vs weight {weight.shape}")
    if eps < 0:
        raise ContractError("rmsnorm: eps must be nonnegative")
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True) + eps
    inv = np.zeros_like(ms)
    np.divide(1.0, np.sqrt(ms), out=inv, where=ms > 0)
    xhat = xd * inv
    out = xhat * wd

    def backward(g):
        gx = gw = None
        if weight.tracked:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.tracked:
            gh = g * wd
            gx = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _finish("rmsnorm", out, (x, weight), backward)


def _softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    p = _softmax(x.data)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _finish("softmax_rows", p, (x,), backward)


def rope_angles(positions, head_dim: int, theta_base: float) -> np.ndarray:
    """Rotation angles ``[T, head_dim/2]`` for pairs (2i, 2i+1)."""
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    pos = np.asarray(positions, dtype=DTYPE)
    inv_freq = theta_base ** (-np.arange(0, head_dim, 2, dtype=DTYPE) / head_dim)
    return np.outer(pos, inv_freq)


def _rotate(xd: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_apply(x, positions, theta_base: float = 10000.0, inverse: bool = False) -> Tensor:
    """Rotate ``x[..., T, h, head_dim]`` by position-dependent angles."""
    x = as_tensor(x)
    if x.data.ndim < 3:
        raise DimensionError(f"rope_apply expects [..., T, h, head_dim], got {x.shape}")
    T, _, hd = x.shape[-3:]
    if len(positions) != T:
        raise DimensionError(f"rope_apply: {len(positions)} positions for T={T}")
    if min(positions, default=0) < 0:
        raise ContractError("rope_apply: positions must be nonnegative")
    ang = rope_angles(positions, hd, theta_base)
    if inverse:
        ang = -ang
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    out = _rotate(x.data, cos, sin)

    def backward(g):
        return (_rotate(g, cos, -sin),)

    return _finish("rope_apply", out, (x,), backward)


def causal_attention(q, k, v, q_pos, k_pos) -> Tensor:
    """Grouped-query attention with position-based causal masking.

    q: ``[..., T, H, hd]``; k, v: ``[..., S, KV, hd]`` with ``H % KV == 0``.
    Query at absolute position p attends to keys whose position is <= p.
    ``k_pos`` must be strictly increasing.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != k.data.ndim or k.shape != v.shape:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    T, H, hd = q.shape[-3:]
    S, KV, hdk = k.shape[-3:]
    if hd != hdk or H % KV:
        raise DimensionError(f"attention: q {q.shape} incompatible with k {k.shape}")
    lead = q.shape[:-3]
    if k.shape[:-3] != lead:
        raise DimensionError(f"attention: batch dims {lead} vs {k.shape[:-3]}")
    q_pos = np.asarray(q_pos, dtype=np.int64)
    k_pos = np.asarray(k_pos, dtype=np.int64)
    if len(q_pos) != T or len(k_pos) != S:
        raise DimensionError("attention: position arrays do not match sequence lengths")
    rep = H // KV
    B = int(np.prod(lead)) if lead else 1
    scale = 1.0 / math.sqrt(hd)

    # [B, KV, rep, T, hd] and [B, KV, S, hd]
    qh = q.data.reshape(B, T, KV, rep, hd).transpose(0, 2, 3, 1, 4)
    kh = k.data.reshape(B, S, KV, hd).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, S, KV, hd).transpose(0, 2, 1, 3)
    tracked = q.tracked or k.tracked or v.tracked

    if not tracked:
        outh = np.empty((B, KV, rep, T, hd), dtype=DTYPE)
        qs = qh * scale
        kt = kh.swapaxes(-1, -2)[:, :, None]
        for i0 in range(0, T, ATTN_CHUNK):
            i1 = min(T, i0 + ATTN_CHUNK)
            qp = q_pos[i0:i1]
            s_end = int(np.searchsorted(k_pos, qp.max(), side="right"))
            if int(np.searchsorted(k_pos, qp.min(), side="right")) == 0:
                raise ContractError("attention: a query has no visible key")
            sc = qs[:, :, :, i0:i1, :] @ kt[..., :s_end]
            # only keys after the earliest query position can be masked
            j0 = int(np.searchsorted(k_pos, qp.min(), side="right"))
            if j0 < s_end:
                mask = k_pos[None, j0:s_end] > qp[:, None]
                np.copyto(sc[..., j0:s_end], -np.inf, where=mask)
            sc -= sc.max(axis=-1, keepdims=True)
            np.exp(sc, out=sc)
            denom = sc.sum(axis=-1, keepdims=True)
            blk = sc @ vh[:, :, None, :s_end, :]
            blk /= denom
            outh[:, :, :, i0:i1, :] = blk
        out = outh.transpose(0, 3, 1, 2, 4).reshape(q.shape)
        return _finish("attention", out, (q, k, v), None)

    mask = k_pos[None, :] > q_pos[:, None]
    if mask.all(axis=1).any():
        raise ContractError("attention: a query has no visible key")
    sc = (qh @ kh[:, :, None].swapaxes(-1, -2)) * scale
    sc = np.where(mask, -np.inf, sc)
    p = _softmax(sc)  # [B, KV, rep, T, S]
    outh = p @ vh[:, :, None]
    out = outh.transpose(0, 3, 1, 2, 4).reshape(q.shape)

    def backward(g):
        gh = g.reshape(B, T, KV, rep, hd).transpose(0, 2, 3, 1, 4)
        gq = gk = gv = None
        if v.tracked:
            gvh = (p.swapaxes(-1, -2) @ gh).sum(axis=2)  # [B, KV, S, hd]
            gv = gvh.transpose(0, 2, 1, 3).reshape(v.shape)
        if q.tracked or k.tracked:
            dp = gh @ vh[:, :, None].swapaxes(-1, -2)
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
            if q.tracked:
                gqh = ds @ kh[:, :, None]
                gq = gqh.transpose(0, 3, 1, 2, 4).reshape(q.shape)
            if k.tracked:
                gkh = (ds.swapaxes(-1, -2) @ qh).sum(axis=2)
                gk = gkh.transpose(0, 2, 1, 3).reshape(k.shape)
        return gq, gk, gv

    return _finish("attention", out, (q, k, v), backward)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Sum over masked positions of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise DimensionError(f"cross_entropy: mask {mask.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise VocabIndexError(f"cross_entropy: target outside [0, {V})")
    z = logits.data
    m = np.max(z, axis=-1, keepdims=True)
    lse = (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = np.where(mask, lse - picked, 0.0)
    out = np.asarray(nll.sum())

    def backward(g):
        p = _softmax(z)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * mask[..., None] * g,)

    return _finish("cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------- backward


def backward(tape: GradientTape, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` for every registered leaf.

    Leaves the loss does not depend on get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    grads: list = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(loss.shape, dtype=DTYPE)
    nodes = tape.nodes
    for i in range(loss.node, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.backward is None:
            continue
        in_grads = node.backward(g)
        for src, ig in zip(node.inputs, in_grads):
            if src is None or ig is None:
                continue
            grads[src] = ig if grads[src] is None else grads[src] + ig
        grads[i] = None
    result = {}
    for name, idx in tape.leaves.items():
        g = grads[idx] if idx < len(grads) else None
        result[name] = np.zeros(tape.leaf_shapes[name], dtype=DTYPE) if g is None else g
    return result
