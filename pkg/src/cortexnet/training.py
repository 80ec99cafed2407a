"""Optimizer and the per-step training sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tf
from .config import ModelConfig
from .controller import ControllerParams, ReplayController
from .net import CortexNet


def lr_at(step: int, cfg: ModelConfig) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay to zero at ``total_steps``."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.total_steps - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay on 2-D weight matrices other than the token embedding."""

    def __init__(self, named_params, cfg: ModelConfig):
        self.cfg = cfg
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}
        self.decay = {n: (p.ndim == 2 and n != "embedding") for n, p in named_params}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in zip(self.names, self.params):
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.decay[n] and cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


@dataclass
class StepReport:
    step: int
    lr: float
    grad_norm: float
    losses: dict
    queue_before_flush: int
    queue_after_flush: int
    writes: int
    mem_count: int
    hippo: dict = field(default_factory=dict)
    replay: dict = field(default_factory=dict)
    controller: dict | None = None


# a control callback returns (current task, {task: perplexity}, selection perplexity)
ControlFn = Callable[[CortexNet], tuple]


class Trainer:
    def __init__(self, model: CortexNet, control_fn: ControlFn | None = None, use_controller: bool = True):
        self.model = model
        self.cfg = model.cfg
        self.opt = AdamW(model.trainable_parameters(), model.cfg)
        self.step = 0
        self.control_fn = control_fn
        self.controller = ReplayController(ControllerParams.from_config(model.cfg))
        self.use_controller = use_controller and model.cfg.replay_active
        if self.use_controller:
            lam, rho, b_r = self.controller.baseline()
            model.lambda_rep, model.rho_long, model.B_R = lam, rho, b_r

    def train_step(self, micro_batches, on_micro_step: Callable[[int], None] | None = None) -> StepReport:
        """One optimizer step over ``grad_accum`` micro-batches of (x, y).

        Order: sample replay for every micro-batch, then per micro-batch forward (queue
        write, push chunks) and backward; flush pending writes; clip; update; EMA of slow
        heads; controller on its cadence. ``on_micro_step(i)`` is called after each
        micro-batch backward, before the flush.
        """
        model, cfg = self.model, self.cfg
        model.train()
        model.zero_grad()
        stores = model.replay
        stores.begin_step()
        n_mb = len(micro_batches)
        samples = []
        for _ in micro_batches:
            if cfg.replay_active and model.lambda_rep > 0:
                samples.append(stores.sample(model.B_R, model.rho_long))
            else:
                samples.append(None)
        parts_sum: dict = {}
        for i, ((x, y), x_rep) in enumerate(zip(micro_batches, samples)):
            loss, parts, _ = model.total_loss(x, y, x_rep)
            tf.backward(loss * (1.0 / n_mb))
            if on_micro_step is not None:
                on_micro_step(i)
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v / n_mb
        hippo = model.hippo
        q_before = len(hippo.queue) if hippo is not None else 0
        writes = hippo.flush_pending() if hippo is not None else 0
        q_after = len(hippo.queue) if hippo is not None else 0
        params = model.parameters()
        gnorm = clip_grad_norm(params, cfg.clip_norm)
        lr = lr_at(self.step, cfg)
        self.opt.step(lr)
        if hippo is not None:
            hippo.update_slow_targets()
        self.step += 1
        ctrl = None
        if (self.use_controller and self.control_fn is not None
                and self.step % self.controller.params.every == 0):
            ctrl = self.run_controller()
        recent, long = stores.counts()
        return StepReport(
            step=self.step, lr=lr, grad_norm=gnorm, losses=parts_sum,
            queue_before_flush=q_before, queue_after_flush=q_after, writes=writes,
            mem_count=hippo.memory.count if hippo is not None else 0,
            hippo=hippo.diagnostics.as_dict() if hippo is not None else {},
            replay=dict(replay_loss=parts_sum.get("replay", 0.0), b_r=model.B_R, rho_long=model.rho_long,
                        ring_occupancy=recent, reservoir_occupancy=long),
            controller=ctrl,
        )

    def run_controller(self) -> dict:
        model = self.model
        current, measured, ppl_sel = self.control_fn(model)
        lam, rho, b_r = self.controller.update(current, measured, ppl_sel, step=self.step)
        model.lambda_rep, model.rho_long, model.B_R = lam, rho, b_r
        return self.controller.history[-1].as_dict()
