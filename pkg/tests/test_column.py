import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cortexnet import tensor as tf
from cortexnet.column import Column, load_balance_penalty
from cortexnet.errors import DimensionError
from helpers import dense_moe_oracle, tiny_config


def make_column(seed=0, **kw):
    cfg = tiny_config(**kw)
    return Column(cfg, tf.Rng(seed).child(1, 0)), cfg


def test_moe_matches_dense_oracle():
    for seed in range(20):
        col, cfg = make_column(seed, E=4, k_E=2)
        v = np.random.default_rng(seed).normal(size=(2, 3, cfg.d))
        out, stats = col.moe_forward(tf.Tensor(v))
        assert np.max(np.abs(out.data - dense_moe_oracle(col, v))) < 1e-10
        assert np.all(np.abs(stats.weights.data.sum(-1) - 1.0) < 1e-12)


def test_moe_single_expert_and_full_support():
    col, cfg = make_column(0, E=1, k_E=1)
    v = np.random.default_rng(0).normal(size=(1, 4, cfg.d))
    out, stats = col.moe_forward(tf.Tensor(v))
    assert np.all(stats.weights.data == 1.0)
    assert np.allclose(out.data, col.experts[0](tf.Tensor(v)).data, atol=1e-14)

    col, cfg = make_column(0, E=3, k_E=3)
    _, stats = col.moe_forward(tf.Tensor(v))
    w_full = np.take_along_axis(stats.probs.data, stats.selected, axis=-1)
    assert np.allclose(stats.weights.data, w_full, atol=1e-14)


def test_moe_evaluates_at_most_k_experts_per_token():
    col, cfg = make_column(3, E=4, k_E=2)
    v = np.random.default_rng(3).normal(size=(2, 5, cfg.d))
    col._expert_evals = 0
    col.moe_forward(tf.Tensor(v))
    assert col._expert_evals == 2 * 5 * cfg.k_E


def test_load_balance_examples():
    e, n, lam = 4, 8, 0.01
    uniform = np.full((n, e), 1.0 / e)
    assert abs(load_balance_penalty(uniform, lam).item() - lam) < 1e-15
    one_hot = np.eye(e)[np.arange(n) % e]
    assert abs(load_balance_penalty(one_hot, lam).item() - lam) < 1e-15
    collapsed = np.tile(np.eye(e)[0], (n, 1))
    assert abs(load_balance_penalty(collapsed, lam).item() - lam * e) < 1e-15


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 12))
def test_load_balance_matches_brute_force(seed, e, n):
    g = np.random.default_rng(seed).random((n, e))
    g /= g.sum(-1, keepdims=True)
    ref = 0.0
    for k in range(e):
        load = sum(1 for row in g if int(np.argmax(row)) == k) / n
        ref += load * g[:, k].mean()
    val = load_balance_penalty(g, 0.02).item()
    assert abs(val - 0.02 * e * ref) < 1e-14
    assert val >= 0.0


def test_attention_single_position():
    col, cfg = make_column(1)
    h = np.random.default_rng(1).normal(size=(1, 1, cfg.d))
    out = col.attention_forward(tf.Tensor(h), None).data
    u = tf.rms_norm(h, col.gamma_attn.data).data
    v = (u @ col.W_V.data).reshape(1, 1, cfg.h_kv, cfg.d_h)
    v = np.repeat(v, cfg.h // cfg.h_kv, axis=2).reshape(1, 1, cfg.d)
    assert np.allclose(out, v @ col.W_O.data, atol=1e-13)


def test_zero_modulation_equals_absent():
    col, cfg = make_column(2)
    h = tf.Tensor(np.random.default_rng(2).normal(size=(2, 4, cfg.d)))
    a = col.attention_forward(h, None).data
    b = col.attention_forward(h, tf.Tensor(np.zeros((2, 4, cfg.d)))).data
    assert np.array_equal(a, b)


def test_modulation_shape_checked():
    col, cfg = make_column(2)
    with pytest.raises(DimensionError):
        col.attention_forward(tf.Tensor(np.zeros((1, 3, cfg.d))), tf.Tensor(np.zeros((1, 2, cfg.d))))


def test_attention_is_causal_and_broken_mask_is_not():
    col, cfg = make_column(4)
    rng = np.random.default_rng(4)
    h = rng.normal(size=(2, 6, cfg.d))
    z = rng.normal(size=(2, 6, cfg.d))
    h2, z2 = h.copy(), z.copy()
    h2[:, 3:] = rng.normal(size=(2, 3, cfg.d))
    z2[:, 3:] = rng.normal(size=(2, 3, cfg.d))
    out = col(tf.Tensor(h), tf.Tensor(z))
    out2 = col(tf.Tensor(h2), tf.Tensor(z2))
    assert np.max(np.abs(out.hidden.data[:, :3] - out2.hidden.data[:, :3])) <= 1e-9
    col._broken_mask = True
    bad = col(tf.Tensor(h), tf.Tensor(z)).hidden.data
    bad2 = col(tf.Tensor(h2), tf.Tensor(z2)).hidden.data
    assert np.max(np.abs(bad[:, :3] - bad2[:, :3])) > 1e-6


def test_residual_identity_with_zero_weights():
    col, cfg = make_column(5)
    for p in (col.W_O, col.W_L5):
        p.data[...] = 0.0
    for ex in col.experts:
        ex.W2.data[...] = 0.0
    h = np.random.default_rng(5).normal(size=(1, 4, cfg.d))
    out = col(tf.Tensor(h), None)
    assert np.array_equal(out.hidden.data, h)
    assert out.lb_penalty.item() >= 0.0


def test_full_column_gradient_check():
    col, cfg = make_column(6, E=2, k_E=1)
    rng = np.random.default_rng(6)
    h = tf.Tensor(rng.normal(size=(1, 4, cfg.d)), requires_grad=True)
    z = tf.Tensor(rng.normal(size=(1, 4, cfg.d)) * 0.3, requires_grad=True)
    w_h, w_c = rng.normal(size=(1, 4, cfg.d)), rng.normal(size=(1, 4, cfg.d))

    def f():
        out = col(h, z)
        return tf.tsum(out.hidden * w_h) + tf.tsum(out.layer5 * w_c) + out.lb_penalty * 10.0

    leaves = [h, z] + col.parameters()
    assert tf.finite_diff_check(f, leaves) < 1e-4
