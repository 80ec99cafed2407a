"""
Episodic memory with content-addressable reads and deferred, surprise-gated writes.

The store is read during the forward pass and only written at optimizer-step
boundaries: a training forward queues ``(states, surprise)`` and
:meth:`Hippocampus.flush_pending` commits the selected states later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tf
from .config import ModelConfig
from .errors import ContractError
from .module import Module
from .tensor import Rng, Tensor, init_uniform, parameter

COS_EPS = 1e-8


@dataclass
class EpisodicMemory:
    keys: np.ndarray
    values: np.ndarray
    ptr: int = 0
    count: int = 0
    tau: float = 0.0

    @classmethod
    def empty(cls, n_slots: int, d_k: int, d: int) -> "EpisodicMemory":
        return cls(np.zeros((n_slots, d_k)), np.zeros((n_slots, d)))

    @property
    def n_slots(self) -> int:
        return self.keys.shape[0]

    def snapshot(self) -> tuple:
        return (self.keys.copy(), self.values.copy(), self.ptr, self.count, self.tau)

    def write(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[0]
        # later rows win if a single flush wraps the whole buffer
        skip = max(0, n - self.n_slots)
        slots = (self.ptr + np.arange(skip, n)) % self.n_slots
        self.keys[slots] = k[skip:]
        self.values[slots] = v[skip:]
        self.ptr = int((self.ptr + n) % self.n_slots)
        self.count = int(min(self.n_slots, self.count + n))


@dataclass
class PendingWrite:
    states: np.ndarray   # [B, T, d], detached copy
    surprise: np.ndarray  # [B, T]


@dataclass
class HippoDiagnostics:
    mean_surprise: float = 0.0
    max_surprise: float = 0.0
    last_thr: float = 0.0
    keep_frac_topk: float = 0.0
    write_frac_raw: float = 0.0
    last_n_write: int = 0
    mem_count: int = 0
    short_sequence: bool = False

    def as_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class HippoAux:
    td_loss: Tensor
    pred_term: Tensor
    pred_raw: float
    readout: Tensor
    surprise: np.ndarray
    diagnostics: HippoDiagnostics = field(default_factory=HippoDiagnostics)


def recent_window_indices(mem: EpisodicMemory, s_max: int) -> np.ndarray:
    """Slots of the most recent ``min(count, s_max)`` writes, oldest first."""
    n_read = min(mem.count, s_max)
    if n_read == 0:
        return np.zeros(0, dtype=np.int64)
    if mem.count < mem.n_slots:
        return np.arange(mem.count - n_read, mem.count, dtype=np.int64)
    return (mem.ptr - n_read + np.arange(n_read, dtype=np.int64)) % mem.n_slots


def chunked_topk(q: np.ndarray, keys: np.ndarray, k: int, chunk: int) -> np.ndarray:
    """Window positions of the exact top-k scores <q, key>/sqrt(d_k), scanning keys in chunks.

    Ties go to the lower window position, so the result equals a stable full sort.
    """
    n = keys.shape[0]
    scale = 1.0 / math.sqrt(keys.shape[1])
    lead = q.shape[:-1]
    best_val = np.empty(lead + (0,))
    best_pos = np.empty(lead + (0,), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        vals = (q @ keys[start:stop].T) * scale
        pos = np.broadcast_to(np.arange(start, stop), vals.shape)
        cat_v = np.concatenate([best_val, vals], axis=-1)
        cat_p = np.concatenate([best_pos, pos], axis=-1)
        # running entries precede the chunk and hold smaller positions, so a stable sort keeps order
        order = np.argsort(-cat_v, axis=-1, kind="stable")[..., :k]
        best_val = np.take_along_axis(cat_v, order, axis=-1)
        best_pos = np.take_along_axis(cat_p, order, axis=-1)
    return best_pos


def quantile_linear(values: np.ndarray, q: float) -> float:
    """Sorted-order linear interpolation quantile with inclusive endpoints.

    Written out rather than delegated to np.quantile, whose lerp rounds differently
    near the upper neighbour; this form is the one the threshold is defined by.
    """
    s = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise ContractError("quantile of an empty array")
    pos = q * (s.size - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, s.size - 1)
    return float(s[lo] + (s[hi] - s[lo]) * (pos - lo))


def top_frac_mask(g: np.ndarray, rho: float) -> np.ndarray:
    """0/1 mask keeping the ceil(rho*d) largest channels per row, ties to the lowest index."""
    d = g.shape[-1]
    keep = min(d, max(1, math.ceil(rho * d - 1e-12)))
    idx = np.argsort(-g, axis=-1, kind="stable")[..., :keep]
    mask = np.zeros_like(g)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    return mask


def _silu_np(x):
    # same arithmetic as tf.silu so identical weights give identical outputs
    return x * tf._sigmoid_np(x)


def _normalize_np(x):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, COS_EPS)


class Hippocampus(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        d, d_k = cfg.d, cfg.d_k
        self.cfg = cfg
        self.W_Q_hip = init_uniform(rng, d, (d, d_k))
        self.W_O_hip = init_uniform(rng, d, (d, d))
        self.g_hip = parameter(np.zeros(d))
        # fast predictor and value head
        self.P_W1 = init_uniform(rng, d, (d, d))
        self.P_b1 = parameter(np.zeros(d))
        self.P_W2 = init_uniform(rng, d, (d, d))
        self.P_b2 = parameter(np.zeros(d))
        self.v_w = init_uniform(rng, d, (d, 1))
        self.v_b = parameter(np.zeros(1))
        # frozen write projections: plain arrays, outside the parameter set
        bound = 1.0 / math.sqrt(d)
        self._W_K_write = rng.uniform(-bound, bound, (d, d_k))
        self._W_V_write = rng.uniform(-bound, bound, (d, d))
        self._slow = self.fast_arrays()
        self._memory = EpisodicMemory.empty(cfg.N_s, d_k, d)
        self._queue: list[PendingWrite] = []
        self._diag = HippoDiagnostics()

    # -- state accessors -------------------------------------------------
    @property
    def memory(self) -> EpisodicMemory:
        return self._memory

    @property
    def queue(self) -> list[PendingWrite]:
        return self._queue

    @property
    def W_K_write(self) -> np.ndarray:
        return self._W_K_write

    @property
    def W_V_write(self) -> np.ndarray:
        return self._W_V_write

    @property
    def slow(self) -> dict[str, np.ndarray]:
        return self._slow

    def fast_arrays(self) -> dict[str, np.ndarray]:
        names = ("P_W1", "P_b1", "P_W2", "P_b2", "v_w", "v_b")
        return {n: getattr(self, n).data.copy() for n in names}

    # -- read ------------------------------------------------------------
    def memory_read(self, h_inj: Tensor, chunk: int | None = None) -> tuple[Tensor, Tensor]:
        """Returns the gated output M and the raw readout R, both [B, T, d]."""
        cfg = self.cfg
        mem = self._memory
        b, t, d = h_inj.shape
        idx = recent_window_indices(mem, cfg.S_max)
        if idx.size == 0:
            zero = Tensor(np.zeros((b, t, d), dtype=h_inj.data.dtype))
            return zero, zero
        keys = mem.keys[idx]
        vals = mem.values[idx]
        q = h_inj @ self.W_Q_hip
        k = min(cfg.k_H, idx.size)
        pos = chunked_topk(q.data, keys, k, chunk or cfg.chunk)
        k_sel = keys[pos]                      # [B, T, k, d_k]
        v_sel = vals[pos]                      # [B, T, k, d]
        scores = (q.reshape(b, t, 1, cfg.d_k) @ np.swapaxes(k_sel, -1, -2)) * (1.0 / math.sqrt(cfg.d_k))
        alpha = tf.softmax_lastdim(scores)
        readout = (alpha @ v_sel).reshape(b, t, d)
        m = (readout @ self.W_O_hip) * tf.sigmoid(self.g_hip)
        return m, readout

    # -- learning signals ------------------------------------------------
    def _predict_fast(self, x: np.ndarray) -> Tensor:
        hid = tf.silu(tf.as_tensor(x) @ self.P_W1 + self.P_b1)
        return hid @ self.P_W2 + self.P_b2

    def _predict_slow(self, x: np.ndarray) -> np.ndarray:
        s = self._slow
        return _silu_np(x @ s["P_W1"] + s["P_b1"]) @ s["P_W2"] + s["P_b2"]

    def predictive_terms(self, x: np.ndarray):
        """Intrinsic reward [B, T-1], raw predictor loss, fast and slow cosines."""
        nxt = _normalize_np(x[:, 1:])
        p = self._predict_fast(x[:, :-1])
        norm = tf.clip(tf.sqrt(tf.tsum(p * p, axis=-1, keepdims=True)), COS_EPS, np.inf)
        c_fast = tf.tsum((p / norm) * nxt, axis=-1)
        c_slow = np.sum(_normalize_np(self._predict_slow(x[:, :-1])) * nxt, axis=-1)
        reward = np.maximum(0.0, tf.detach(c_fast) - c_slow)
        pred_raw = tf.mean(1.0 - c_fast)
        return reward, pred_raw, c_fast, c_slow

    def td_terms(self, x: np.ndarray, reward: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Semi-gradient TD loss on the fast critic and the slow-critic surprise per position."""
        cfg = self.cfg
        v_fast = (tf.as_tensor(x) @ self.v_w + self.v_b).reshape(x.shape[0], x.shape[1])
        v_now = v_fast[:, :-1]
        target = reward + cfg.gamma * tf.detach(v_fast)[:, 1:]
        delta = tf.clip(tf.sub(target, v_now), -cfg.delta_max, cfg.delta_max)
        td_loss = tf.mean(delta * delta) * 0.5
        s = self._slow
        v_slow = (x @ s["v_w"] + s["v_b"])[..., 0]
        d_slow = np.clip(reward + cfg.gamma * v_slow[:, 1:] - v_slow[:, :-1], -cfg.delta_max, cfg.delta_max)
        surprise = np.zeros(x.shape[:2], dtype=x.dtype)
        surprise[:, 1:] = np.abs(d_slow)
        return td_loss, surprise

    def learning_terms(self, x: np.ndarray):
        """Returns (td_loss, pred_raw tensor, surprise); zero terms when T < 2."""
        if x.shape[1] < 2:
            self._diag.short_sequence = True
            zero = Tensor(np.zeros(()))
            return zero, zero, np.zeros(x.shape[:2])
        reward, pred_raw, _, _ = self.predictive_terms(x)
        td_loss, surprise = self.td_terms(x, reward)
        return td_loss, pred_raw, surprise

    # -- forward ---------------------------------------------------------
    def forward(self, h_inj: Tensor, with_losses: bool):
        m, readout = self.memory_read(h_inj)
        x = tf.detach(h_inj)
        if with_losses:
            td_loss, pred_raw, surprise = self.learning_terms(x)
        else:
            td_loss = pred_raw = Tensor(np.zeros(()))
            surprise = None
        diag = self._diag
        if surprise is not None:
            diag.mean_surprise = float(surprise.mean())
            diag.max_surprise = float(surprise.max())
        diag.mem_count = self._memory.count
        aux = HippoAux(td_loss, pred_raw * self.cfg.eta_pred, float(pred_raw.data), readout,
                       surprise, HippoDiagnostics(**diag.as_dict()))
        return m, x, aux

    # -- deferred writes -------------------------------------------------
    def enqueue_pending(self, states: np.ndarray, surprise: np.ndarray) -> None:
        self._queue.append(PendingWrite(np.array(states, copy=True), np.array(surprise, copy=True)))

    def clear_pending(self) -> None:
        self._queue.clear()

    def flush_pending(self) -> int:
        """Commit queued states whose surprise beats the running threshold; returns writes made."""
        cfg = self.cfg
        mem = self._memory
        total = 0
        cand_total = 0
        raw_above = 0
        positions = 0
        for item in self._queue:
            s = item.surprise
            b, t = s.shape
            k_w = min(cfg.k_W, t)
            top = np.argsort(-s, axis=-1, kind="stable")[:, :k_w]
            pool = np.take_along_axis(s, top, axis=-1)
            rho_keep = min(1.0, cfg.n_target / k_w)
            tau_batch = quantile_linear(pool.reshape(-1), 1.0 - rho_keep)
            mem.tau = float(cfg.beta_tau * mem.tau + (1.0 - cfg.beta_tau) * tau_batch)
            chosen = np.zeros((b, t), dtype=bool)
            np.put_along_axis(chosen, top, pool > mem.tau, axis=-1)
            rows, cols = np.nonzero(chosen)       # row-major: b ascending, then t ascending
            if rows.size:
                states = item.states[rows, cols]
                mem.write(states @ self._W_K_write, states @ self._W_V_write)
            total += rows.size
            cand_total += pool.size
            raw_above += int((s > mem.tau).sum())
            positions += s.size
        self._queue.clear()
        diag = self._diag
        diag.last_thr = mem.tau
        diag.last_n_write = total
        diag.keep_frac_topk = total / cand_total if cand_total else 0.0
        diag.write_frac_raw = raw_above / positions if positions else 0.0
        diag.mem_count = mem.count
        return total

    def update_slow_targets(self, alpha: float | None = None) -> None:
        a = self.cfg.alpha if alpha is None else alpha
        for name, slow in self._slow.items():
            slow *= a
            slow += (1.0 - a) * getattr(self, name).data

    @property
    def diagnostics(self) -> HippoDiagnostics:
        return self._diag
