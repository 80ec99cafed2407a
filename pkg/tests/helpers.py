"""Shared builders for gradient checks and small models."""

import math

import numpy as np

from cortexnet import tensor as tf
from cortexnet.column import Column
from cortexnet.config import ModelConfig
from cortexnet.hippocampus import recent_window_indices
from cortexnet.net import CortexNet
from cortexnet.thalamus import causal_past_mean, trn_competition


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return tf.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _weighted(out, w):
    # a random linear functional keeps every output element in play
    return tf.tsum(out * w)


def op_cases(rng):
    """(name, f, leaves) for every differentiable primitive, each scalarized by a random functional."""
    cases = []

    def add_case(name, fn, *leaves):
        # fn receives the leaves as arguments so each case binds its own tensors
        w = rng.normal(size=fn(*leaves).shape)
        cases.append((name, lambda: _weighted(fn(*leaves), w), list(leaves)))

    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    add_case("add", lambda a, b: tf.add(a, b), a, b)
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 1)
    add_case("sub", lambda a, b: tf.sub(a, b), a, b)
    a, b = leaf(rng, 3, 4), leaf(rng, 1, 4)
    add_case("mul", lambda a, b: tf.mul(a, b), a, b)
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4, lo=0.5, hi=2.0)
    add_case("div", lambda a, b: tf.div(a, b), a, b)
    a = leaf(rng, 5, lo=0.5, hi=2.0)
    add_case("power", lambda a: tf.power(a, 2.5), a)
    a = leaf(rng, 2, 3)
    add_case("exp", lambda a: tf.exp(a), a)
    a = leaf(rng, 2, 3, lo=0.3, hi=3.0)
    add_case("log", lambda a: tf.log(a), a)
    a = leaf(rng, 2, 3, lo=0.3, hi=3.0)
    add_case("sqrt", lambda a: tf.sqrt(a), a)
    a = tf.Tensor(rng.choice([-1, 1], (2, 3)) * rng.uniform(0.2, 1.0, (2, 3)), requires_grad=True)
    add_case("absolute", lambda a: tf.absolute(a), a)
    a = leaf(rng, 2, 3, lo=-4, hi=4)
    add_case("sigmoid", lambda a: tf.sigmoid(a), a)
    a = leaf(rng, 2, 3, lo=-4, hi=4)
    add_case("silu", lambda a: tf.silu(a), a)
    a = tf.Tensor(rng.choice([-1, 1], (2, 3)) * rng.uniform(0.2, 1.0, (2, 3)), requires_grad=True)
    add_case("relu", lambda a: tf.relu(a), a)
    a = tf.Tensor(np.array([-2.0, -0.4, 0.1, 0.6, 1.7]), requires_grad=True)
    add_case("clip", lambda a: tf.clip(a, -1.0, 1.0), a)
    a = leaf(rng, 3, 4, 2)
    add_case("sum", lambda a: tf.tsum(a, axis=1, keepdims=True), a)
    a = leaf(rng, 3, 4, 2)
    add_case("mean", lambda a: tf.mean(a, axis=(0, 2)), a)
    a = leaf(rng, 3, 4)
    add_case("reshape", lambda a: tf.reshape(a, (2, 6)), a)
    a = leaf(rng, 2, 3, 4)
    add_case("transpose", lambda a: tf.transpose(a, (2, 0, 1)), a)
    a = leaf(rng, 4, 5)
    add_case("getitem", lambda a: tf.getitem(a, (np.array([0, 2, 2]), np.array([1, 1, 4]))), a)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    add_case("concat", lambda a, b: tf.concat([a, b], axis=-1), a, b)
    a = leaf(rng, 4, 3)
    add_case("index_rows", lambda a: tf.index_rows(a, np.array([3, 0, 3, 1])), a)
    a = leaf(rng, 2, 3)
    add_case("scatter_rows", lambda a: tf.scatter_rows(a, np.array([4, 1]), 5), a)
    a = leaf(rng, 3, 5)
    add_case("gather_last", lambda a: tf.gather_last(a, np.array([[0, 4], [2, 2], [1, 3]])), a)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    add_case("matmul", lambda a, b: tf.matmul(a, b), a, b)
    a, b = leaf(rng, 3, 6), leaf(rng, 6, lo=0.5, hi=1.5)
    add_case("rms_norm", lambda a, b: tf.rms_norm(a, b), a, b)
    a = leaf(rng, 2, 4, 4, lo=-2, hi=2)
    mask = tf.causal_mask(4)
    add_case("softmax", lambda a: tf.softmax_lastdim(a, mask), a)
    a = leaf(rng, 1, 2, 5, 4)
    add_case("rope", lambda a: tf.rope(a, 10.0), a)
    a = leaf(rng, 1, 2, 3, 4)
    add_case("repeat_kv", lambda a: tf.repeat_kv(a, 3), a)
    a = leaf(rng, 3, 6)
    add_case("topk_values", lambda a: tf.topk_lastdim(a, 2)[0], a)
    a = leaf(rng, 2, 3, 7, lo=-2, hi=2)
    labels = np.array([[0, 6, -100], [3, -100, 2]])
    cases.append(("cross_entropy", lambda a=a: tf.cross_entropy(a, labels), [a]))
    a = leaf(rng, 2, 5, 3)
    add_case("causal_past_mean", lambda a: causal_past_mean(a), a)
    z, w_trn, b_trn = leaf(rng, 2, 3, 8), leaf(rng, 8, 8), leaf(rng, 8)
    add_case("trn_competition", lambda z, w_trn, b_trn: trn_competition(z, w_trn, b_trn, 2, 1.0), z, w_trn, b_trn)
    return cases


def tiny_config(**kw) -> ModelConfig:
    """d=16 instance used for whole-model gradient checks."""
    base = dict(d=16, L=3, h=4, h_kv=2, E=2, k_E=1, d_ff=16, r=8, G=2, N_s=32, d_k=8, k_H=3,
                S_max=16, chunk=5, k_W=3, L_R=4, N_recent=16, N_long=16, B_R=2, V=258)
    base.update(kw)
    return ModelConfig(**base)


def shifted(x: np.ndarray) -> np.ndarray:
    y = np.full_like(x, -100)
    y[:, :-1] = x[:, 1:]
    return y


def dense_moe_oracle(col: Column, v: np.ndarray) -> np.ndarray:
    """Evaluate every expert on every token and zero the unselected ones."""
    cfg = col.cfg
    flat = v.reshape(-1, cfg.d)
    logits = flat @ col.W_G.data
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    out = np.zeros_like(flat)
    for n in range(flat.shape[0]):
        order = sorted(range(cfg.E), key=lambda e: (-p[n, e], e))[: cfg.k_E]
        z = sum(p[n, e] for e in order)
        for e in order:
            ex = col.experts[e]
            a = flat[n] @ ex.W1.data
            hid = a / (1 + np.exp(-a)) * (flat[n] @ ex.W3.data)
            out[n] += (p[n, e] / z) * (hid @ ex.W2.data)
    return out.reshape(v.shape)


def full_scan_read(hip, h):
    """Unchunked oracle: score the whole window, stable sort, softmax the top k."""
    cfg, mem = hip.cfg, hip.memory
    idx = recent_window_indices(mem, cfg.S_max)
    keys, vals = mem.keys[idx], mem.values[idx]
    q = h @ hip.W_Q_hip.data
    k = min(cfg.k_H, idx.size)
    b, t, d = h.shape
    out = np.zeros((b, t, d))
    for i in range(b):
        for j in range(t):
            sc = keys @ q[i, j] / math.sqrt(cfg.d_k)
            top = sorted(range(idx.size), key=lambda n: (-sc[n], n))[:k]
            w = np.exp(sc[top] - sc[top].max())
            w /= w.sum()
            out[i, j] = w @ vals[top]
    return out


def seeded_model(**kw):
    """Tiny model with nonzero gates and a partly filled memory so every path is live."""
    cfg = tiny_config(**kw)
    m = CortexNet(cfg)
    rng = np.random.default_rng(cfg.seed)
    for p in m.parameters():
        if p.data.ndim == 1 and np.all(p.data == 0):
            p.data[...] = rng.normal(size=p.data.shape) * 0.3
    if m.hippo is not None:
        m.hippo.memory.write(rng.normal(size=(12, cfg.d_k)), rng.normal(size=(12, cfg.d)))
    return m, cfg


# criterion number -> PASS/FAIL line, filled by the acceptance tests
ACCEPTANCE: dict = {}
