"""Thalamic router: a bottlenecked, strictly causal modulation signal between columns."""

from __future__ import annotations

import numpy as np

from . import tensor as tf
from .config import ModelConfig
from .module import Module
from .tensor import Rng, Tensor, init_uniform, parameter


def _kahan_prefix_sums(z: np.ndarray) -> np.ndarray:
    """Exclusive prefix sums along axis 1 with compensated accumulation."""
    out = np.zeros_like(z)
    acc = np.zeros_like(z[:, 0])
    comp = np.zeros_like(acc)
    for t in range(1, z.shape[1]):
        y = z[:, t - 1] - comp
        s = acc + y
        comp = (s - acc) - y
        acc = s
        out[:, t] = acc
    return out


def causal_past_mean(z0) -> Tensor:
    """Mean of strictly earlier positions along axis 1; zero at the first position."""
    z0 = tf.as_tensor(z0)
    t = z0.shape[1]
    denom = np.maximum(np.arange(t), 1).astype(z0.data.dtype)
    shape = (1, t) + (1,) * (z0.ndim - 2)
    inv = (1.0 / denom).reshape(shape)
    inv_first_zero = inv.copy()
    inv_first_zero[:, 0] = 0.0
    # true division: one rounding, so mu * count recovers integer prefix sums where IEEE allows
    out = _kahan_prefix_sums(z0.data) / denom.reshape(shape)

    def backward(g):
        # dz[j] = sum_{t > j} g[t] / t: reverse cumulative sum, shifted by one
        w = g * inv_first_zero
        rc = np.flip(np.cumsum(np.flip(w, axis=1), axis=1), axis=1)
        gz = np.zeros_like(g)
        gz[:, :-1] = rc[:, 1:]
        return (gz,)

    return tf.from_op(out, (z0,), backward, "causal_past_mean")


def full_sequence_mean(z0) -> Tensor:
    """Non-causal stand-in for the past mean, used only as a fault fixture."""
    z0 = tf.as_tensor(z0)
    return tf.mean(z0, axis=1, keepdims=True) + tf.mul(z0, 0.0)


def surprise_stat(z0, mu) -> Tensor:
    """(1/r) * ||z0_t - mu_t||^2 per token."""
    diff = tf.sub(z0, mu)
    return tf.mean(diff * diff, axis=-1)


def trn_competition(z1, W_trn, b_trn, groups: int, eta: float) -> Tensor:
    """Sigmoid gate with divisive normalization inside feature groups, applied to ``z1``."""
    z1 = tf.as_tensor(z1)
    r = z1.shape[-1]
    g = tf.sigmoid(z1 @ W_trn + b_trn)
    n_groups = groups if groups > 1 and r % groups == 0 else 1
    lead = z1.shape[:-1]
    gg = g.reshape(*lead, n_groups, r // n_groups)
    gt = gg / (tf.mean(gg, axis=-1, keepdims=True) * eta + 1.0)
    return z1 * gt.reshape(*lead, r)


class Thalamus(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        d, r = cfg.d, cfg.r
        self.cfg = cfg
        self.W_c = init_uniform(rng, d, (d, r))
        self.gamma_z = parameter(np.ones(r))
        self.W_loc = init_uniform(rng, r, (r, r))
        self.W_diff = init_uniform(rng, r, (r, r))
        self.w_state = init_uniform(rng, r, (r, 1))
        self.b_state = parameter(np.zeros(1))
        self.alpha_s = parameter(np.zeros(1))
        self.a_diff = parameter(np.zeros(1))
        self.W_trn = init_uniform(rng, r, (r, r))
        self.b_trn = parameter(np.zeros(r))
        self.W_back = init_uniform(rng, r, (r, d))
        self.g_mod = parameter(np.zeros(d))
        # fault fixture: replace the causal past mean with a full-sequence mean
        self._noncausal = False

    def __call__(self, c: Tensor) -> Tensor:
        return self.forward(c)

    def forward(self, c: Tensor) -> Tensor:
        z0 = tf.rms_norm(c @ self.W_c, self.gamma_z)
        z_loc = tf.silu(z0 @ self.W_loc)
        mu = full_sequence_mean(z0) if self._noncausal else causal_past_mean(z0)
        s = surprise_stat(z0, mu)
        z_diff = tf.silu(mu @ self.W_diff)
        g_state = tf.sigmoid(z0 @ self.w_state + self.b_state + self.alpha_s * s.reshape(*s.shape, 1))
        z1 = z_loc + tf.sigmoid(self.a_diff) * g_state * z_diff
        z2 = trn_competition(z1, self.W_trn, self.b_trn, self.cfg.G, self.cfg.eta)
        return (z2 @ self.W_back) * tf.sigmoid(self.g_mod)
