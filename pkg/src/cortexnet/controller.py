"""Proportional-integral replay controller driven by forgetting measured in log-perplexity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import ModelConfig
from .errors import InputError


@dataclass
class ControllerParams:
    beta: float = 0.2
    g_tar: float = 0.02
    k_p: float = 2.0
    k_i: float = 0.1
    k_rho: float = 1.0
    k_B: float = 2.0
    lambda0: float = 0.1
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    rho0: float = 0.25
    B0: int = 8
    B_min: int = 2
    B_max: int = 32
    I_max: float = 5.0
    every: int = 240
    batches: int = 5

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "ControllerParams":
        return cls(beta=cfg.ctrl_beta, g_tar=cfg.ctrl_g_tar, k_p=cfg.ctrl_k_p, k_i=cfg.ctrl_k_i,
                   k_rho=cfg.ctrl_k_rho, k_B=cfg.ctrl_k_B, lambda0=cfg.ctrl_lambda0,
                   lambda_min=cfg.ctrl_lambda_min, lambda_max=cfg.ctrl_lambda_max, rho0=cfg.ctrl_rho0,
                   B0=cfg.ctrl_B0, B_min=cfg.ctrl_B_min, B_max=cfg.ctrl_B_max, I_max=cfg.ctrl_I_max,
                   every=cfg.ctrl_every, batches=cfg.ctrl_batches)


@dataclass
class ControllerRecord:
    step: int
    f_bar: float
    g: float
    g_ema: float
    e: float
    integral: float
    lambda_rep: float
    rho_long: float
    b_r: int

    def as_dict(self) -> dict:
        return dict(vars(self))


def _clip(x, lo, hi):
    return min(hi, max(lo, x))


@dataclass
class ReplayController:
    params: ControllerParams = field(default_factory=ControllerParams)
    g_ema: float = 0.0
    integral: float = 0.0
    post_refs: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def record_post_task(self, task, ppl: float) -> None:
        """Store u* = ln(ppl) for a finished task; a later call overwrites."""
        if not ppl > 0:
            raise InputError(f"perplexity must be positive, got {ppl}")
        self.post_refs[task] = math.log(ppl)

    def reset_integral(self) -> None:
        self.integral = 0.0

    def baseline(self) -> tuple[float, float, int]:
        p = self.params
        return (_clip(p.lambda0, p.lambda_min, p.lambda_max), _clip(p.rho0, 0.0, 1.0),
                int(_clip(round(p.B0), p.B_min, p.B_max)))

    def update(self, current_task, measured: dict, ppl_sel: float, step: int = 0):
        """One control step; returns (lambda_rep, rho_long, B_R)."""
        p = self.params
        for task, ppl in measured.items():
            if task not in self.post_refs and task != current_task:
                raise InputError(f"task {task!r} has no post-task reference")
            if not ppl > 0:
                raise InputError(f"perplexity for task {task!r} must be positive, got {ppl}")
        if not ppl_sel > 0:
            raise InputError(f"selection perplexity must be positive, got {ppl_sel}")
        gaps = [max(0.0, math.log(ppl) - self.post_refs[k]) for k, ppl in measured.items() if k != current_task]
        f_bar = sum(gaps) / len(gaps) if gaps else 0.0
        g = f_bar / max(1.0, abs(math.log(ppl_sel)))
        self.g_ema = (1.0 - p.beta) * self.g_ema + p.beta * g
        e = max(0.0, self.g_ema - p.g_tar)
        self.integral = min(p.I_max, self.integral + e)
        lam = _clip(p.lambda0 + p.k_p * e + p.k_i * self.integral, p.lambda_min, p.lambda_max)
        rho = _clip(p.rho0 + p.k_rho * e, 0.0, 1.0)
        b_r = int(_clip(round(p.B0 * (1.0 + p.k_B * e)), p.B_min, p.B_max))
        self.history.append(ControllerRecord(step, f_bar, g, self.g_ema, e, self.integral, lam, rho, b_r))
        return lam, rho, b_r

    def state(self) -> dict:
        return dict(g_ema=self.g_ema, integral=self.integral,
                    post_refs={str(k): v for k, v in self.post_refs.items()})

    def load_state(self, st: dict) -> None:
        self.g_ema = float(st["g_ema"])
        self.integral = float(st["integral"])
        self.post_refs = {_task_key(k): float(v) for k, v in st["post_refs"].items()}


def _task_key(k: str):
    return int(k) if k.lstrip("-").isdigit() else k
