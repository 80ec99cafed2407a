"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation produces a new :class:`Tensor` and, when any
operand requires a gradient, records a node on the global :class:`Tape`. Nodes
carry a monotonically increasing id, so operands always precede the nodes that
consume them. :func:`backward` collects the nodes reachable from a scalar loss
and replays them in exact reverse recording order.

Kernels are plain numpy calls executed on the calling thread. Reductions use
numpy's pairwise summation along the reduced axis; with a fixed BLAS thread
count the results are bit-reproducible.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Switch the working precision. float32 is meant for throughput smoke tests only."""
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DTYPE


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class _DetachLog:
    """Record/replay of stop-gradient values, so finite differences see them as constants."""

    def __init__(self):
        self.mode = None          # None, "record" or "replay"
        self.values: list[np.ndarray] = []
        self.pos = 0


_DETACH = _DetachLog()


def detach(a) -> np.ndarray:
    """Value of ``a`` cut from the tape, as a fresh array."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    log = _DETACH
    if log.mode == "replay":
        if log.pos >= len(log.values):
            raise ContractError("detach replay ran past the recorded values")
        out = log.values[log.pos]
        log.pos += 1
        return out.copy()
    out = np.array(data, copy=True)
    if log.mode == "record":
        log.values.append(out.copy())
    return out


@contextmanager
def _detach_mode(mode: str, reset: bool):
    log = _DETACH
    prev = log.mode
    log.mode = mode
    if reset:
        log.values = []
    log.pos = 0
    try:
        yield
    finally:
        log.mode = prev


class _Node:
    __slots__ = ("id", "parents", "backward", "op")

    def __init__(self, node_id, parents, backward, op):
        self.id = node_id
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Append-only record of differentiable operations.

    Nodes are owned by their output tensors, so an abandoned graph is
    reclaimed by the garbage collector; the tape itself only hands out ids.
    """

    def __init__(self):
        self._ids = itertools.count(1)

    def record(self, out: "Tensor", parents, backward, op: str) -> None:
        out._node = _Node(next(self._ids), parents, backward, op)

    def nodes_for(self, root: "Tensor") -> list["Tensor"]:
        """Non-leaf tensors reachable from ``root``, newest first."""
        seen = set()
        found = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(p for p in t._node.parents if p.requires_grad)
        found.sort(key=lambda t: t._node.id, reverse=True)
        return found


TAPE = Tape()


class Tensor:
    """An n-dimensional array with an optional gradient and a place on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "op") -> Tensor:
    """Wrap a freshly computed array as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.name = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        TAPE.record(out, tuple(parents), backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return from_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return from_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return from_op(out, (a, b), backward, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return from_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid_np(x)
    return from_op(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is passed only strictly inside the interval."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return from_op(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    return from_op(np.mean(a.data, axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims) / n,), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _has_array_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    fancy = _has_array_index(idx)

    def backward(g):
        z = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] += g
        return (z,)

    return from_op(np.array(a.data[idx]), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return from_op(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def index_rows(a, idx: np.ndarray) -> Tensor:
    """Rows of ``a`` selected by an integer index (repeats allowed)."""
    a = as_tensor(a)
    shape = a.shape
    idx = np.asarray(idx)

    def backward(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return from_op(a.data[idx], (a,), backward, "index_rows")


def scatter_rows(src, idx: np.ndarray, n: int) -> Tensor:
    """An ``n``-row array with ``src`` rows placed at distinct positions ``idx``."""
    src = as_tensor(src)
    idx = np.asarray(idx)
    out = np.zeros((n,) + src.shape[1:], dtype=src.data.dtype)
    out[idx] = src.data
    return from_op(out, (src,), lambda g: (g[idx],), "scatter_rows")


def gather_last(a, idx: np.ndarray) -> Tensor:
    """``take_along_axis`` on the last dimension."""
    a = as_tensor(a)
    shape = a.shape
    idx = np.asarray(idx)

    def backward(g):
        z = np.zeros(shape, dtype=g.dtype)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(z, tuple(lead) + (idx,), g)
        return (z,)

    return from_op(np.take_along_axis(a.data, idx, axis=-1), (a,), backward, "gather_last")


# ---------------------------------------------------------------------------
# linear algebra and network primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dimensions of {ad.shape} and {bd.shape} do not broadcast") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return from_op(out, (a, b), backward, "matmul")


def rms_norm(u, gamma, eps: float = 1e-6) -> Tensor:
    u, gamma = as_tensor(u), as_tensor(gamma)
    if eps < 0:
        raise ContractError("rms_norm: eps must be nonnegative")
    if gamma.ndim != 1 or gamma.shape[0] != u.shape[-1]:
        raise DimensionError(f"rms_norm: gamma shape {gamma.shape} does not match width {u.shape[-1]}")
    x = u.data
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    gd = gamma.data

    def backward(g):
        gu = ggam = None
        if u.requires_grad:
            gg = g * gd
            gu = inv * (gg - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, gd.shape[0]).sum(axis=0)
        return gu, ggam

    return from_op(xhat * gd, (u, gamma), backward, "rms_norm")


_NEG_INF = -np.inf


def causal_mask(t: int) -> np.ndarray:
    """Additive mask: 0 where key position <= query position, -inf elsewhere."""
    m = np.zeros((t, t))
    m[np.triu_indices(t, 1)] = _NEG_INF
    return m


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax over the last axis with an optional additive 0/-inf mask."""
    x = as_tensor(x)
    z = x.data if mask is None else x.data + mask
    zmax = np.max(z, axis=-1, keepdims=True)
    if mask is not None and np.any(np.isneginf(zmax)):
        raise ContractError("softmax: a row has every entry masked")
    e = np.exp(z - zmax)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return from_op(y, (x,), backward, "softmax")


def rope_tables(t: int, d_h: int, theta: float, dtype=None):
    if d_h % 2:
        raise ValueError(f"rope: head width {d_h} must be even")
    i = np.arange(d_h // 2)
    omega = theta ** (-2.0 * i / d_h)
    ang = np.arange(t)[:, None] * omega[None, :]
    return np.cos(ang).astype(dtype or _DTYPE), np.sin(ang).astype(dtype or _DTYPE)


def rope(x, theta: float) -> Tensor:
    """Rotate (even, odd) feature pairs of ``x[..., T, d_h]`` by ``t * omega_i`` at position t."""
    x = as_tensor(x)
    t, d_h = x.shape[-2], x.shape[-1]
    from .errors import ConfigError

    if d_h % 2:
        raise ConfigError(f"rope: head width {d_h} must be even")
    cos, sin = rope_tables(t, d_h, theta, x.data.dtype)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return from_op(out, (x,), backward, "rope")


def rope_apply(q, k, theta: float) -> tuple[Tensor, Tensor]:
    return rope(q, theta), rope(k, theta)


def repeat_kv(x, r_kv: int) -> Tensor:
    """Expand ``[B, h_kv, T, d_h]`` to ``[B, h_kv*r_kv, T, d_h]``; output head i reads input head i // r_kv."""
    x = as_tensor(x)
    if r_kv < 1:
        raise ContractError("repeat_kv: r_kv must be >= 1")
    if r_kv == 1:
        return x
    b, h, t, d = x.shape

    def backward(g):
        return (g.reshape(b, h, r_kv, t, d).sum(axis=2),)

    return from_op(np.repeat(x.data, r_kv, axis=1), (x,), backward, "repeat_kv")


def topk_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties to the lowest index."""
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"topk: k={k} outside [1, {n}]")
    return np.argsort(-x, axis=-1, kind="stable")[..., :k]


def topk_lastdim(x, k: int) -> tuple[Tensor, np.ndarray]:
    x = as_tensor(x)
    idx = topk_indices(x.data, k)
    return gather_last(x, idx), idx


def cross_entropy(logits, labels: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over labelled rows; zero with no gradient if none are labelled."""
    logits = as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    n, v = z.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= v)):
        raise InputError(f"cross_entropy: label outside [0, {v})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.zeros((), dtype=z.dtype))
    rows = np.nonzero(valid)[0]
    zv = z[rows]
    zmax = zv.max(axis=-1, keepdims=True)
    ez = np.exp(zv - zmax)
    se = ez.sum(axis=-1, keepdims=True)
    lse = np.log(se) + zmax
    lab = labels[rows]
    nll = lse[:, 0] - zv[np.arange(n_valid), lab]
    shape = logits.shape

    def backward(g):
        gz = np.zeros_like(z)
        p = ez / se
        p[np.arange(n_valid), lab] -= 1.0
        gz[rows] = p * (g / n_valid)
        return (gz.reshape(shape),)

    return from_op(np.asarray(nll.mean()), (logits,), backward, "cross_entropy")


def dropout(x, p: float, rng: "Rng | None", training: bool) -> Tensor:
    if p <= 0.0 or not training:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from a scalar loss.

    Leaf gradients accumulate across calls until reset by :func:`zero_grad`.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in TAPE.nodes_for(loss):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = np.array(pg, dtype=p.data.dtype) if p.grad is None else p.grad + pg
            else:
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
                      max_per_leaf: int | None = None, rng: np.random.Generator | None = None,
                      freeze_detached: bool = False) -> float:
    """Largest |ad - fd| / max(1, |ad|, |fd|) over leaf elements, using central differences.

    ``max_per_leaf`` restricts the probe to a random subset of elements per leaf.
    With ``freeze_detached`` every value passed through :func:`detach` keeps its
    unperturbed value during the probes, which is what reverse mode differentiates.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    zero_grad(leaves)
    if freeze_detached:
        with _detach_mode("record", reset=True):
            loss = f()
        backward(loss)
    else:
        backward(f())
    worst = 0.0
    for leaf in leaves:
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        elems = np.arange(flat.size)
        if max_per_leaf is not None and flat.size > max_per_leaf:
            elems = (rng or np.random.default_rng(0)).choice(flat.size, max_per_leaf, replace=False)
        adf = ad.reshape(-1)
        for i in elems:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = _probe(f, freeze_detached)
                flat[i] = orig - h
                fm = _probe(f, freeze_detached)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(adf[i] - fd) / max(1.0, abs(adf[i]), abs(fd))
            worst = max(worst, err)
    zero_grad(leaves)
    return worst


def _probe(f: Callable[[], Tensor], frozen: bool) -> float:
    if not frozen:
        return f().item()
    with _detach_mode("replay", reset=False):
        return f().item()


# ---------------------------------------------------------------------------
# deterministic random numbers
# ---------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream (numpy's reference implementation).

    Identical seeds give bit-identical streams on every platform numpy supports.
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *key: int) -> "Rng":
        """Independent stream derived from this seed and an integer key path."""
        ss = np.random.SeedSequence([self.seed, *key])
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r._gen = np.random.Generator(np.random.PCG64(ss))
        return r

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, lo, hi, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, lo, hi=None, size=None):
        return self._gen.integers(lo, hi, size)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def init_uniform(rng: Rng, fan_in: int, shape, name: str | None = None) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) parameter."""
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, shape).astype(_DTYPE), name=name)
