import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cortexnet import tensor as tf
from cortexnet.errors import ContractError
from cortexnet.net import CortexNet
from cortexnet.replay import ReplayStores, chunk_tokens
from helpers import tiny_config


def stores(n_recent=8, n_long=4, l_r=2, seed=0):
    return ReplayStores(l_r, n_recent, n_long, tf.Rng(seed))


def id_chunks(start, n, l_r=2):
    # chunk i is [i, i, ...] so its identity survives storage
    return np.repeat(np.arange(start, start + n)[:, None], l_r, axis=1)


@pytest.mark.parametrize("t,l_r,m", [(1024, 256, 4), (1000, 256, 3), (100, 256, 0)])
def test_chunk_counts(t, l_r, m):
    x = np.arange(2 * t).reshape(2, t)
    c = chunk_tokens(x, l_r)
    assert c.shape == (2 * m, l_r)
    if m:
        assert np.array_equal(c[m - 1], x[0, (m - 1) * l_r: m * l_r])
        assert np.array_equal(c[m], x[1, :l_r])


def test_chunk_length_must_allow_a_transition():
    with pytest.raises(ValueError):
        chunk_tokens(np.zeros((1, 8), dtype=int), 1)


def test_first_n_long_chunks_all_enter_reservoir():
    s = stores(n_long=6)
    s.push_chunks(id_chunks(0, 4))
    s.push_chunks(id_chunks(4, 2))
    assert sorted(s.long[:, 0].tolist()) == list(range(6))


def test_ring_overwrites_oldest():
    s = stores(n_recent=4)
    s.push_chunks(id_chunks(0, 3))
    s.push_chunks(id_chunks(3, 3))
    assert s.recent[:, 0].tolist() == [4, 5, 2, 3]
    assert s.recent_count == 4 and s.recent_ptr == 2


@given(st.lists(st.integers(0, 9), max_size=12), st.integers(1, 6))
def test_occupancy_tracks_seen(sizes, n_long):
    s = stores(n_long=n_long)
    total = 0
    for k in sizes:
        s.push_chunks(id_chunks(total, k))
        total += k
        assert s.seen == total
        assert s.long_count == min(total, n_long)
        assert s.recent_count == min(total, s.n_recent)
        s.begin_step()


def test_replacement_probability_monte_carlo():
    n_long, n = 4, 10
    trials = 100_000
    hits = 0
    for i in range(trials):
        s = stores(n_recent=2, n_long=n_long, seed=i)
        s.push_chunks(id_chunks(0, n))
        s.push_chunks(id_chunks(n, 1))
        hits += n in s.long[:, 0]
    p = n_long / (n + 1)
    sigma = math.sqrt(p * (1 - p) / trials)
    assert abs(hits / trials - p) < 3 * sigma


def test_reservoir_inclusion_is_uniform():
    n_long, k, trials = 64, 50 * 64, 10_000
    counts = np.zeros(k)
    offered = id_chunks(0, k)
    for i in range(trials):
        s = stores(n_recent=2, n_long=n_long, seed=i)
        s.push_chunks(offered)
        counts[s.long[:, 0]] += 1
    assert counts.sum() == n_long * trials
    p = stats.chisquare(counts).pvalue
    assert p > 0.01, p


@pytest.mark.parametrize("b_r,rho,n_long,n_recent", [(8, 0.25, 2, 6), (8, 0.0, 0, 8), (5, 0.5, 2, 3)])
def test_sample_split(b_r, rho, n_long, n_recent):
    s = stores(n_recent=16, n_long=16)
    s.push_chunks(id_chunks(0, 16))           # ids 0..15 in both stores
    s.long[:, 0] = 100                        # tag reservoir rows
    s.begin_step()
    out = s.sample(b_r, rho)
    assert out.shape == (b_r, 2)
    assert int((out[:, 0] == 100).sum()) == n_long
    assert int((out[:, 0] < 100).sum()) == n_recent


def test_empty_reservoir_falls_back_to_ring():
    s = stores()
    s.push_chunks(id_chunks(0, 3))
    s.long[...] = 0
    s.seen = 0                                # reservoir reports empty
    s.begin_step()
    out = s.sample(4, 0.5)
    assert out.shape == (4, 2) and np.all(out[:, 0] >= 0) and np.all(out[:, 0] < 3)


def test_empty_ring_falls_back_to_reservoir_and_both_empty_gives_nothing():
    s = stores()
    assert s.sample(4, 0.5).shape == (0, 2)
    s.push_chunks(id_chunks(0, 3))
    s.recent_count = 0
    s.begin_step()
    assert s.sample(4, 0.0).shape == (4, 2)


def test_sampling_after_push_in_same_step_is_refused():
    s = stores()
    s.push_chunks(id_chunks(0, 2))
    with pytest.raises(ContractError):
        s.sample(2, 0.5)
    s.begin_step()
    s.sample(2, 0.5)


def test_sentinel_never_sampled_in_its_own_step():
    s = stores(n_recent=6, n_long=6, seed=3)
    sentinel_base = 10_000
    for step in range(100):
        s.begin_step()
        out = s.sample(8, 0.5)
        assert not np.any(out[:, 0] == sentinel_base + step)
        s.push_chunks(id_chunks(sentinel_base + step, 1))


def test_sampling_is_reproducible():
    a, b = stores(seed=9), stores(seed=9)
    for s in (a, b):
        s.push_chunks(id_chunks(0, 20))
        s.begin_step()
    assert np.array_equal(a.sample(6, 0.5), b.sample(6, 0.5))


# -- replay loss ------------------------------------------------------------

def test_uniform_logits_give_log_vocab():
    cfg = tiny_config()
    model = CortexNet(cfg)
    model.gamma_f.data[...] = 0.0
    x = np.random.default_rng(0).integers(0, cfg.V, (2, cfg.L_R))
    assert abs(model.replay_loss(x).item() - math.log(cfg.V)) < 1e-12


def test_replay_loss_matches_shifted_nll_and_leaves_state_alone():
    cfg = tiny_config()
    model = CortexNet(cfg)
    x = np.random.default_rng(1).integers(0, cfg.V, (1, cfg.L_R))
    seen_before = model.replay.seen
    loss = model.replay_loss(x).item()
    assert model.replay.seen == seen_before
    assert len(model.hippo.queue) == 0
    z = model.logits(x[:, :-1])[0]
    lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) + z.max(-1)
    ref = np.mean(lse - z[np.arange(cfg.L_R - 1), x[0, 1:]])
    assert abs(loss - ref) < 1e-12
