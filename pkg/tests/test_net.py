import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cortexnet import tensor as tf
from cortexnet.errors import InputError
from cortexnet.hippocampus import top_frac_mask
from cortexnet.net import estimate_forward_cost, grad_coverage_check, hippo_feedback
from cortexnet.tensor import parameter
from helpers import seeded_model, shifted, tiny_config


def tokens(cfg, b=2, t=8, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.V, (b, t))


# -- feedback ---------------------------------------------------------------

@given(st.integers(0, 1000), st.floats(0.01, 1.0))
def test_top_fraction_count_matches_sort_oracle(seed, rho):
    g = np.random.default_rng(seed).integers(0, 4, (3, 10)).astype(float)
    mask = top_frac_mask(g, rho)
    keep = math.ceil(rho * 10 - 1e-12)
    assert np.all(mask.sum(-1) == keep)
    for row, mrow in zip(g, mask):
        order = sorted(range(10), key=lambda j: (-row[j], j))[:keep]
        assert sorted(np.nonzero(mrow)[0].tolist()) == sorted(order)


def test_feedback_full_fraction_and_zero_memory():
    m, cfg = seeded_model(rho_top=1.0)
    fb = m.feedback
    rng = np.random.default_rng(1)
    x, mem = rng.normal(size=(1, 3, cfg.d)), rng.normal(size=(1, 3, cfg.d))
    g = 1 / (1 + np.exp(-(np.concatenate([x, mem], -1) @ fb.W_gate.data + fb.b_gate.data)))
    ref = 1 / (1 + np.exp(-fb.a_hip.data)) * ((g * mem) @ fb.W_hip_thal.data)
    assert np.allclose(hippo_feedback(x, mem, fb).data, ref, atol=1e-13)
    assert np.all(hippo_feedback(x, np.zeros_like(mem), fb).data == 0.0)


# -- forward ----------------------------------------------------------------

def test_eval_forward_is_repeatable():
    m, cfg = seeded_model()
    m.eval()
    x = tokens(cfg)
    assert np.array_equal(m.logits(x), m.logits(x))


def test_eval_matches_train_logits_and_clears_queue():
    m, cfg = seeded_model()
    x = tokens(cfg)
    logits, _ = m.forward(x, targets=shifted(x))
    assert len(m.hippo.queue) == 1
    m.eval()
    assert np.array_equal(m.logits(x), logits.data)
    assert len(m.hippo.queue) == 0


def test_input_errors():
    m, cfg = seeded_model()
    with pytest.raises(InputError):
        m.forward(np.array([[0, cfg.V]]))
    with pytest.raises(InputError):
        m.forward(np.array([[0.0, 1.0]]))
    x = tokens(cfg, t=9)
    with pytest.raises(InputError):
        m.forward(x[:, :8], targets=x[:, 1:])       # a strided view, not contiguous
    with pytest.raises(InputError):
        m.forward(x, targets=shifted(x)[:, :4].copy())


def test_tied_embedding_feeds_the_head():
    m, cfg = seeded_model()
    m.eval()
    x = np.array([[1, 2, 3]])
    before = m.logits(x)
    m.embedding.data[200] += 1.0                    # token 200 is not in the input
    after = m.logits(x)
    assert np.array_equal(np.delete(before, 200, -1), np.delete(after, 200, -1))
    assert np.all(before[..., 200] != after[..., 200])


def test_late_layers_share_one_hippocampal_term():
    m, cfg = seeded_model(L=5, disable_thalamus=True)
    x = tokens(cfg)
    _, aux = m.forward(x, targets=shifted(x))
    assert m.l_inj == 3
    assert aux.modulation[0] is None and aux.modulation[1] is None and aux.modulation[2] is None
    assert aux.modulation[3] is aux.f_hip and aux.modulation[4] is aux.f_hip
    assert np.any(aux.f_hip.data != 0)


def test_late_modulation_is_router_plus_feedback():
    m, cfg = seeded_model(L=4)
    captured = {}
    router = m.routers[2]

    def spy(layer5):
        captured["f_thal"] = router(layer5)
        return captured["f_thal"]

    m.routers[2] = spy
    x = tokens(cfg)
    _, aux = m.forward(x, targets=shifted(x))
    assert m.l_inj == 2
    assert np.array_equal(aux.modulation[3].data, (captured["f_thal"] + aux.f_hip).data)


def test_injection_layer():
    for L, want in [(1, 1), (2, 1), (3, 2), (4, 2), (6, 4)]:
        assert tiny_config(L=L).l_inj == want


# -- objective --------------------------------------------------------------

def test_all_aux_weights_zero_gives_lm_loss():
    m, cfg = seeded_model(lambda_router=0.0, lambda_td=0.0, lambda_pred=0.0)
    m.lambda_rep = 0.0
    x = tokens(cfg)
    loss, parts, aux = m.total_loss(x, shifted(x), tokens(cfg, t=cfg.L_R, seed=3))
    assert loss.item() == aux.lm_loss.item()
    assert parts["replay"] == 0.0


def test_total_loss_is_sum_of_recomputed_parts():
    m, cfg = seeded_model(lambda_router=0.7, lambda_td=0.3, lambda_pred=0.9)
    m.lambda_rep = 0.4
    x, xr = tokens(cfg), tokens(cfg, t=cfg.L_R, seed=5)
    loss, parts, aux = m.total_loss(x, shifted(x), xr)
    ref = (parts["lm"] + 0.7 * parts["lb"] + 0.3 * parts["td"] + 0.9 * parts["pred"]
           + 0.4 * parts["replay"])
    assert abs(loss.item() - ref) < 1e-10
    m.eval()
    z = m.logits(x)[:, :-1].reshape(-1, cfg.V)
    lab = x[:, 1:].reshape(-1)
    lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) + z.max(-1)
    assert abs(parts["lm"] - np.mean(lse - z[np.arange(len(lab)), lab])) < 1e-10
    assert abs(parts["replay"] - m.replay_loss(xr).item()) < 1e-12


def test_model_gradient_check_sampled():
    m, cfg = seeded_model()
    m.lambda_rep = 0.5
    x, xr = tokens(cfg), tokens(cfg, t=cfg.L_R, seed=7)

    def f():
        m.hippo.clear_pending()
        return m.total_loss(x, shifted(x), xr)[0]

    err = tf.finite_diff_check(f, m.parameters(), max_per_leaf=6, freeze_detached=True)
    assert err < 1e-4


# -- coverage and cost ------------------------------------------------------

def test_gradient_coverage_and_orphan():
    m, cfg = seeded_model()
    m.orphan_probe = parameter(np.zeros(3))
    x = tokens(cfg)
    m.zero_grad()
    tf.backward(m.total_loss(x, shifted(x))[0])
    covered, uncovered = grad_coverage_check(m)
    assert "orphan_probe" in uncovered
    names = covered + uncovered
    assert not any("write" in n.lower() for n in names)
    assert all(n in covered for n in names if n.startswith("columns.") and "W_L5" not in n
               and "W_Q_thal" not in n)


def test_cost_terms():
    cfg = tiny_config(E=4, k_E=2)
    c1, c2 = estimate_forward_cost(cfg, 2, 8), estimate_forward_cost(cfg, 2, 16)
    L, d = cfg.L, cfg.d
    quad = lambda c, t: c["attention"] - L * 2 * t * d * d
    assert quad(c2, 16) == 4 * quad(c1, 8)
    dense = estimate_forward_cost(cfg.replace(k_E=4), 2, 8)["moe"]
    assert dense == L * (16 * d * 4 + 16 * 4 * d * cfg.d_ff)
    assert c1["thalamus"] == L * 16 * (d * cfg.r + cfg.r ** 2)
    assert c1["hippo_read"] == 16 * d * cfg.d_k + 16 * cfg.S_max * cfg.d_k + 16 * d * d
    assert c1["total"] == sum(v for k, v in c1.items() if k != "total")
    off = estimate_forward_cost(cfg.replace(disable_thalamus=True, disable_hippocampus=True), 2, 8)
    assert off["thalamus"] == off["hippo_read"] == off["replay"] == 0
