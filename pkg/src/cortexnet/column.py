"""One cortical column: pre-norm grouped-query causal attention and a routed SwiGLU mixture of experts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tf
from .config import ModelConfig
from .errors import DimensionError
from .module import Module
from .tensor import Rng, Tensor, init_uniform, parameter


class Expert(Module):
    """SwiGLU feed-forward block: W2 (silu(v W1) * (v W3))."""

    def __init__(self, d: int, d_ff: int, rng: Rng):
        self.W1 = init_uniform(rng, d, (d, d_ff))
        self.W3 = init_uniform(rng, d, (d, d_ff))
        self.W2 = init_uniform(rng, d_ff, (d_ff, d))

    def __call__(self, v: Tensor) -> Tensor:
        return tf.silu(v @ self.W1) * (v @ self.W3) @ self.W2


@dataclass
class GateStats:
    probs: Tensor           # dense softmax gate, [N, E]
    selected: np.ndarray    # top-k expert ids per token, [N, k_E]
    weights: Tensor         # renormalized weights over the selected set, [N, k_E]


@dataclass
class ColumnOutput:
    hidden: Tensor
    layer5: Tensor
    lb_penalty: Tensor
    gates: GateStats


def load_balance_penalty(gates, lambda_lb: float) -> Tensor:
    """lambda_lb * E * sum_e load_e * imp_e with load from the argmax (lowest index on ties)."""
    gates = tf.as_tensor(gates)
    n, e = gates.shape
    top1 = np.argmax(gates.data, axis=-1)
    load = np.bincount(top1, minlength=e) / n
    imp = tf.mean(gates, axis=0)
    return tf.tsum(imp * load) * (lambda_lb * e)


class Column(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        d, h, h_kv, d_h = cfg.d, cfg.h, cfg.h_kv, cfg.d_h
        self.cfg = cfg
        self.gamma_attn = parameter(np.ones(d))
        self.W_Q = init_uniform(rng, d, (d, h * d_h))
        self.W_K = init_uniform(rng, d, (d, h_kv * d_h))
        self.W_V = init_uniform(rng, d, (d, h_kv * d_h))
        self.W_O = init_uniform(rng, h * d_h, (h * d_h, d))
        self.W_Q_thal = init_uniform(rng, d, (d, h * d_h))
        self.gamma_moe = parameter(np.ones(d))
        self.W_G = init_uniform(rng, d, (d, cfg.E))
        self.experts = [Expert(d, cfg.d_ff, rng) for _ in range(cfg.E)]
        self.shared = Expert(d, cfg.d_ff, rng) if cfg.shared_expert else None
        self.W_L5 = init_uniform(rng, d, (d, d))
        # fault fixture: drop the causal mask so the verification battery has something to catch
        self._broken_mask = False
        self._expert_evals = 0
        self._dropout_rng = rng.child(7)
        self._training = False

    # -- attention -------------------------------------------------------
    def attention_forward(self, hid: Tensor, z: Tensor | None) -> Tensor:
        cfg = self.cfg
        b, t, d = hid.shape
        if z is not None and z.shape != hid.shape:
            raise DimensionError(f"thalamic signal shape {z.shape} does not match hidden shape {hid.shape}")
        u = tf.rms_norm(hid, self.gamma_attn)
        q = u @ self.W_Q
        if z is not None:
            q = q + z @ self.W_Q_thal
        q = q.reshape(b, t, cfg.h, cfg.d_h).transpose(0, 2, 1, 3)
        k = (u @ self.W_K).reshape(b, t, cfg.h_kv, cfg.d_h).transpose(0, 2, 1, 3)
        v = (u @ self.W_V).reshape(b, t, cfg.h_kv, cfg.d_h).transpose(0, 2, 1, 3)
        q, k = tf.rope_apply(q, k, cfg.theta_rope)
        r_kv = cfg.h // cfg.h_kv
        k = tf.repeat_kv(k, r_kv)
        v = tf.repeat_kv(v, r_kv)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(cfg.d_h))
        mask = None if self._broken_mask else tf.causal_mask(t)
        att = tf.softmax_lastdim(scores, mask)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, cfg.h * cfg.d_h)
        return y @ self.W_O

    # -- mixture of experts ---------------------------------------------
    def moe_forward(self, v: Tensor) -> tuple[Tensor, GateStats]:
        cfg = self.cfg
        lead = v.shape[:-1]
        flat = v.reshape(-1, cfg.d)
        n = flat.shape[0]
        probs = tf.softmax_lastdim(flat @ self.W_G)
        sel = tf.topk_indices(probs.data, cfg.k_E)
        p_sel = tf.gather_last(probs, sel)
        w = p_sel / tf.tsum(p_sel, axis=-1, keepdims=True)
        out = None
        for e, expert in enumerate(self.experts):
            rows, slot = np.nonzero(sel == e)
            if rows.size == 0:
                continue
            self._expert_evals += rows.size
            y = expert(tf.index_rows(flat, rows)) * tf.getitem(w, (rows, slot)).reshape(-1, 1)
            y = tf.scatter_rows(y, rows, n)
            out = y if out is None else out + y
        if self.shared is not None:
            s = self.shared(flat)
            out = s if out is None else out + s
        return out.reshape(*lead, cfg.d), GateStats(probs, sel, w)

    def column_forward(self, hid: Tensor, z: Tensor | None) -> ColumnOutput:
        cfg = self.cfg
        a = self.attention_forward(hid, z)
        h_t = hid + tf.dropout(a, cfg.dropout, self._dropout_rng, self._training)
        m, stats = self.moe_forward(tf.rms_norm(h_t, self.gamma_moe))
        h_plus = h_t + tf.dropout(m, cfg.dropout, self._dropout_rng, self._training)
        c = h_plus @ self.W_L5
        lb = load_balance_penalty(stats.probs, cfg.lambda_lb)
        return ColumnOutput(h_plus, c, lb, stats)

    __call__ = column_forward
