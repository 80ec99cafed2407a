"""Model and run configuration with validation and layered overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class ModelConfig:
    # vocabulary and cortex
    V: int = 258
    d: int = 128
    L: int = 4
    h: int = 8
    h_kv: int = 4
    E: int = 4
    k_E: int = 2
    d_ff: int = 256
    shared_expert: bool = False
    theta_rope: float = 10000.0
    dropout: float = 0.0
    # thalamic router
    r: int = 16
    G: int = 4
    eta: float = 1.0
    share_router: bool = False
    # hippocampus
    N_s: int = 1024
    d_k: int = 64
    k_H: int = 8
    S_max: int = 512
    chunk: int = 128
    k_W: int = 8
    n_target: int = 2
    beta_tau: float = 0.9
    gamma: float = 0.95
    delta_max: float = 1.0
    alpha: float = 0.999
    eta_pred: float = 1.0
    rho_top: float = 0.5
    # replay
    L_R: int = 32
    N_recent: int = 4096
    N_long: int = 4096
    B_R: int = 8
    rho_long: float = 0.25
    lambda_rep: float = 0.1
    # objective
    lambda_router: float = 1.0
    lambda_lb: float = 0.01
    lambda_td: float = 1.0
    lambda_pred: float = 1.0
    # replay controller
    ctrl_beta: float = 0.2
    ctrl_g_tar: float = 0.02
    ctrl_k_p: float = 2.0
    ctrl_k_i: float = 0.1
    ctrl_k_rho: float = 1.0
    ctrl_k_B: float = 2.0
    ctrl_I_max: float = 5.0
    ctrl_lambda0: float = 0.1
    ctrl_lambda_min: float = 0.0
    ctrl_lambda_max: float = 1.0
    ctrl_rho0: float = 0.25
    ctrl_B0: int = 8
    ctrl_B_min: int = 2
    ctrl_B_max: int = 32
    ctrl_every: int = 240
    ctrl_batches: int = 5
    ctrl_p_sel: str = "mean"
    ctrl_reset_on_task: bool = False
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    warmup: int = 1000
    total_steps: int = 22000
    clip_norm: float = 1.0
    grad_accum: int = 1
    seed: int = 0
    # ablations
    disable_thalamus: bool = False
    disable_hippocampus: bool = False
    disable_replay: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def d_h(self) -> int:
        return self.d // self.h

    @property
    def l_inj(self) -> int:
        return max(1, (2 * self.L) // 3)

    @property
    def replay_active(self) -> bool:
        # replay stores live inside the hippocampus, so removing it removes replay too
        return not (self.disable_replay or self.disable_hippocampus)

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        for name in ("V", "d", "L", "h", "h_kv", "E", "k_E", "d_ff", "r", "G", "N_s", "d_k",
                     "k_H", "S_max", "chunk", "k_W", "n_target", "grad_accum", "ctrl_every", "ctrl_batches"):
            need(getattr(self, name) >= 1, name, f"must be >= 1, got {getattr(self, name)}")
        need(self.d % self.h == 0, "h", f"must divide d={self.d}")
        need(self.h % self.h_kv == 0, "h_kv", f"must divide h={self.h}")
        need(self.d_h % 2 == 0, "h", f"head width d/h={self.d_h} must be even for rotary encoding")
        need(self.k_E <= self.E, "k_E", f"must be <= E={self.E}")
        need(self.L_R >= 2, "L_R", "must be >= 2")
        need(0.0 < self.rho_top <= 1.0, "rho_top", "must lie in (0, 1]")
        need(0.0 <= self.gamma < 1.0, "gamma", "must lie in [0, 1)")
        need(self.delta_max > 0, "delta_max", "must be positive")
        need(0.0 <= self.alpha <= 1.0, "alpha", "must lie in [0, 1]")
        need(0.0 <= self.beta_tau <= 1.0, "beta_tau", "must lie in [0, 1]")
        need(0.0 <= self.rho_long <= 1.0, "rho_long", "must lie in [0, 1]")
        need(0.0 <= self.dropout < 1.0, "dropout", "must lie in [0, 1)")
        need(self.ctrl_lambda_min <= self.ctrl_lambda_max, "ctrl_lambda_min", "exceeds ctrl_lambda_max")
        need(1 <= self.ctrl_B_min <= self.ctrl_B_max, "ctrl_B_min", "must satisfy 1 <= B_min <= B_max")
        need(self.ctrl_I_max >= 0, "ctrl_I_max", "must be >= 0")
        need(self.ctrl_p_sel in ("mean", "current"), "ctrl_p_sel", "must be 'mean' or 'current'")
        need(self.N_recent >= 1 and self.N_long >= 1, "N_long", "replay capacities must be >= 1")
        need(self.lr > 0, "lr", "must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**coerce_fields(cls, d))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def verification_config(**kw) -> ModelConfig:
    """Compact instance used by the causality battery (d=128, L=4, h=8, h_kv=4, E=4, r=16, 1024 slots)."""
    base = dict(d=128, L=4, h=8, h_kv=4, E=4, r=16, N_s=1024, d_ff=256, L_R=8, N_recent=256, N_long=256)
    base.update(kw)
    return ModelConfig(**base)


def desk_config(**kw) -> ModelConfig:
    """Small model sized for the three-task CPU stream; learning-rate schedule scaled to 1,320 steps."""
    base = dict(d=64, L=3, h=4, h_kv=2, E=4, k_E=2, d_ff=128, r=16, G=4, N_s=1024, d_k=32, k_H=8,
                S_max=256, chunk=128, L_R=32, N_recent=1024, N_long=1024, lr=3e-3, warmup=50,
                total_steps=1320, ctrl_every=60, B_R=8, ctrl_B0=8)
    base.update(kw)
    return ModelConfig(**base)


@dataclass
class RunConfig:
    """A model config plus stream budgets, cadence, and output location."""

    model: ModelConfig = field(default_factory=desk_config)
    budgets: tuple = (600, 600, 120)
    batch_size: int = 4
    seq_len: int = 64
    eval_every: int = 50
    eval_batches: int = 4
    control_subset: int = 8
    data_seed: int = 1234
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    controller: bool = True

    def validate(self) -> None:
        if len(self.budgets) == 0 or any(int(b) < 1 for b in self.budgets):
            raise ConfigError("budgets: every task needs at least one step")
        for name in ("batch_size", "seq_len", "eval_every", "eval_batches", "control_subset"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.seq_len < 2:
            raise ConfigError("seq_len: must be >= 2")
        if self.control_subset < self.model.ctrl_batches:
            raise ConfigError("control_subset: must hold at least ctrl_batches batches")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["budgets"] = list(self.budgets)
        d["model"] = self.model.to_dict()
        return d


RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "model"}
MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}


def _convert(kind, value: Any, name: str):
    try:
        if kind in (bool, "bool"):
            if isinstance(value, str):
                v = value.strip().lower()
                if v in ("1", "true", "yes", "on"):
                    return True
                if v in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind in (int, "int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (tuple, "tuple"):
            if isinstance(value, str):
                return tuple(int(v) for v in value.replace("/", ",").split(",") if v.strip())
            return tuple(int(v) for v in value)
        return value if not isinstance(value, bytes) else value.decode()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot interpret {value!r} as {getattr(kind, '__name__', kind)}") from exc


def coerce_fields(cls, d: dict) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"{k}: unknown configuration field")
        out[k] = _convert(known[k].type, v, k)
    return out


def read_config_file(path: str | Path) -> dict:
    """Parse a JSON object or plain ``key = value`` lines (``#`` comments allowed)."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
        flat = {k: v for k, v in data.items() if k != "model"}
        flat.update(data.get("model", {}))
        return flat
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config file {path}, line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_run_config(cli: dict, file_values: dict, base: RunConfig | None = None):
    """Merge layers with precedence CLI > file > default.

    Returns the resolved config and a per-field record of where each value came from.
    """
    base = base or RunConfig()
    model_vals = base.model.to_dict()
    run_vals = {k: getattr(base, k) for k in RUN_FIELDS}
    source = {k: "default" for k in list(model_vals) + list(run_vals)}
    for layer, tag in ((file_values, "file"), (cli, "cli")):
        for k, v in layer.items():
            if v is None:
                continue
            if k in RUN_FIELDS:
                run_vals[k] = _convert(RUN_FIELDS[k].type, v, k)
            elif k in MODEL_FIELDS:
                model_vals[k] = _convert(MODEL_FIELDS[k].type, v, k)
            else:
                raise ConfigError(f"{k}: unknown configuration field")
            source[k] = tag
    model = ModelConfig(**model_vals)
    rc = RunConfig(model=model, **run_vals)
    rc.budgets = tuple(int(b) for b in rc.budgets)
    rc.validate()
    return rc, source
