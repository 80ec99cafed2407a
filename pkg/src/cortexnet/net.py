"""
Full model: embedding, early columns chained through thalamic routers, a hippocampal
read at the split layer, late columns with added hippocampal feedback, and a tied head.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tf
from .column import Column
from .config import ModelConfig
from .errors import InputError
from .hippocampus import HippoDiagnostics, Hippocampus, top_frac_mask
from .module import Module
from .replay import ReplayStores, chunk_tokens
from .tensor import Rng, Tensor, init_uniform, parameter
from .thalamus import Thalamus


class HippoFeedback(Module):
    """Sparse gated projection of the memory readout onto the modulatory channel."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        d = cfg.d
        self.rho_top = cfg.rho_top
        self.W_gate = init_uniform(rng, 2 * d, (2 * d, d))
        self.b_gate = parameter(np.zeros(d))
        self.a_hip = parameter(np.zeros(1))
        self.W_hip_thal = init_uniform(rng, d, (d, d))

    def __call__(self, x_detached: np.ndarray, m: Tensor) -> Tensor:
        g_in = tf.concat([tf.Tensor(x_detached), m], axis=-1)
        g = tf.sigmoid(g_in @ self.W_gate + self.b_gate)
        g = g * top_frac_mask(g.data, self.rho_top)
        return tf.sigmoid(self.a_hip) * ((g * m) @ self.W_hip_thal)


def hippo_feedback(x_detached, m, fb: HippoFeedback) -> Tensor:
    return fb(np.asarray(x_detached), tf.as_tensor(m))


@dataclass
class ForwardAux:
    lb_total: Tensor
    td_loss: Tensor
    pred_term: Tensor
    lm_loss: Tensor | None = None
    readout: Tensor | None = None
    f_hip: Tensor | None = None
    modulation: list = field(default_factory=list)
    surprise: np.ndarray | None = None
    diagnostics: HippoDiagnostics | None = None


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


class CortexNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        self.embedding = init_uniform(rng, cfg.d, (cfg.V, cfg.d), name="embedding")
        self.columns = [Column(cfg, rng.child(1, i)) for i in range(cfg.L)]
        if cfg.disable_thalamus:
            self.routers = []
        elif cfg.share_router:
            shared = Thalamus(cfg, rng.child(2, 0))
            self.routers = [shared] * (cfg.L - 1)
        else:
            # the last column's router output is never consumed, so it is not built
            self.routers = [Thalamus(cfg, rng.child(2, i)) for i in range(cfg.L - 1)]
        if cfg.disable_hippocampus:
            self.hippo = None
            self.feedback = None
        else:
            self.hippo = Hippocampus(cfg, rng.child(3))
            self.feedback = HippoFeedback(cfg, rng.child(4))
        self.gamma_f = parameter(np.ones(cfg.d))
        self._replay = ReplayStores(cfg.L_R, cfg.N_recent, cfg.N_long, rng.child(5))
        self._training = True
        self.lambda_rep = 0.0 if not cfg.replay_active else cfg.lambda_rep
        self.rho_long = cfg.rho_long
        self.B_R = cfg.B_R

    # -- mode ------------------------------------------------------------
    @property
    def training(self) -> bool:
        return self._training

    def train(self) -> "CortexNet":
        self._training = True
        for c in self.columns:
            c._training = True
        return self

    def eval(self) -> "CortexNet":
        self._training = False
        for c in self.columns:
            c._training = False
        return self

    @property
    def replay(self) -> ReplayStores:
        return self._replay

    @property
    def l_inj(self) -> int:
        return self.cfg.l_inj

    def clone(self) -> "CortexNet":
        """Deep copy of parameters and every buffer (memory, queue, replay stores, RNG states)."""
        return copy.deepcopy(self)

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.named_parameters())

    # -- forward ---------------------------------------------------------
    def _check_inputs(self, x, targets):
        x = np.asarray(x)
        if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
            raise InputError(f"tokens must be a 2-D integer array, got shape {x.shape} dtype {x.dtype}")
        if x.size and (x.min() < 0 or x.max() >= self.cfg.V):
            raise InputError(f"token id outside [0, {self.cfg.V})")
        if targets is not None:
            if not isinstance(targets, np.ndarray) or not targets.flags.c_contiguous:
                raise InputError("targets must be a C-contiguous array; materialize slices with np.ascontiguousarray")
            if targets.shape != x.shape:
                raise InputError(f"targets shape {targets.shape} does not match tokens shape {x.shape}")
        return x

    def forward(self, x, targets=None, replay: bool = False, embeddings: Tensor | None = None):
        """Returns (logits [B, T, V], aux).

        A training forward with targets queues a pending memory write and pushes token
        chunks into the replay stores. An evaluation forward drops any pending writes.
        ``replay=True`` marks a consolidation pass, which does neither.
        """
        cfg = self.cfg
        x = self._check_inputs(x, targets)
        live = self._training and targets is not None and not replay
        if not self._training and self.hippo is not None:
            self.hippo.clear_pending()
        hid = embeddings if embeddings is not None else tf.index_rows(self.embedding, x)
        lb_terms = []
        f_thal = None
        f_hip = None
        x_inj = None
        aux = ForwardAux(_zero(), _zero(), _zero())
        for ell, col in enumerate(self.columns):
            if ell == 0:
                z = None
            else:
                z = f_thal
                if f_hip is not None:
                    z = f_hip if z is None else z + f_hip
            aux.modulation.append(z)
            out = col(hid, z)
            hid = out.hidden
            lb_terms.append(out.lb_penalty)
            if ell == self.l_inj - 1 and self.hippo is not None:
                m, x_inj, haux = self.hippo.forward(hid, with_losses=live)
                f_hip = self.feedback(x_inj, m)
                aux.td_loss, aux.pred_term = haux.td_loss, haux.pred_term
                aux.readout, aux.f_hip = haux.readout, f_hip
                aux.surprise, aux.diagnostics = haux.surprise, haux.diagnostics
            f_thal = self.routers[ell](out.layer5) if ell < len(self.routers) else None
        logits = tf.rms_norm(hid, self.gamma_f) @ self.embedding.transpose()
        aux.lb_total = lb_terms[0]
        for t in lb_terms[1:]:
            aux.lb_total = aux.lb_total + t
        if targets is not None:
            aux.lm_loss = tf.cross_entropy(logits, targets)
        if live:
            if self.hippo is not None:
                self.hippo.enqueue_pending(x_inj, aux.surprise)
            if cfg.replay_active:
                self._replay.push_chunks(chunk_tokens(x, cfg.L_R))
        return logits, aux

    __call__ = forward

    def replay_loss(self, x_rep: np.ndarray) -> Tensor:
        """Mean next-token NLL over the L_R - 1 transitions of each replay chunk."""
        x_rep = np.asarray(x_rep)
        logits, _ = self.forward(x_rep[:, :-1], replay=True)
        return tf.cross_entropy(logits, np.ascontiguousarray(x_rep[:, 1:]))

    def total_loss(self, x, y, x_rep: np.ndarray | None = None):
        """Full objective and a float breakdown of its components."""
        cfg = self.cfg
        _, aux = self.forward(x, targets=y)
        loss = aux.lm_loss
        if cfg.lambda_router:
            loss = loss + aux.lb_total * cfg.lambda_router
        if cfg.lambda_td:
            loss = loss + aux.td_loss * cfg.lambda_td
        if cfg.lambda_pred:
            loss = loss + aux.pred_term * cfg.lambda_pred
        rep = 0.0
        if x_rep is not None and len(x_rep) and self.lambda_rep:
            l_rep = self.replay_loss(x_rep)
            loss = loss + l_rep * self.lambda_rep
            rep = l_rep.item()
        parts = dict(loss=loss.item(), lm=aux.lm_loss.item(), lb=aux.lb_total.item(),
                     td=aux.td_loss.item(), pred=aux.pred_term.item(), replay=rep,
                     lambda_rep=self.lambda_rep, replay_batch=int(len(x_rep)) if x_rep is not None else 0)
        return loss, parts, aux

    def logits(self, x) -> np.ndarray:
        with tf.no_grad():
            return self.forward(x)[0].data


def estimate_forward_cost(cfg: ModelConfig, B: int, T: int, B_R: int | None = None) -> dict:
    """Leading-order multiply-accumulate counts of one forward pass, per subsystem."""
    L, d, E, k_E, d_ff = cfg.L, cfg.d, cfg.E, cfg.k_E, cfg.d_ff
    bt = B * T
    terms = {
        "attention": L * (B * T * T * d + bt * d * d),
        "moe": L * (bt * d * E + bt * k_E * d * d_ff + (bt * d * d_ff if cfg.shared_expert else 0)),
        "thalamus": 0 if cfg.disable_thalamus else L * bt * (d * cfg.r + cfg.r * cfg.r),
        "hippo_read": 0 if cfg.disable_hippocampus else bt * d * cfg.d_k + bt * cfg.S_max * cfg.d_k + bt * d * d,
    }
    b_r = cfg.B_R if B_R is None else B_R
    l_r = cfg.L_R
    terms["replay"] = (L * (b_r * l_r * l_r * d + b_r * l_r * d * d + b_r * l_r * k_E * d * d_ff)
                       if cfg.replay_active else 0)
    terms["total"] = sum(terms.values())
    return terms


def grad_coverage_check(model: Module) -> tuple[list[str], list[str]]:
    """Split trainable parameters by whether backpropagation reached them."""
    covered, uncovered = [], []
    for name, p in model.named_parameters():
        (covered if p.grad is not None else uncovered).append(name)
    return covered, uncovered
