"""
Checkpoint directory format.

``manifest.json`` holds the configuration, step counters, RNG states, memory
scalars, and controller state, plus shape and sha256 for each array. Every array
is stored as raw little-endian float64 in ``<name>.bin``. Integer buffers (replay
token chunks) are exact in float64 and are cast back on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError

FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def _collect_arrays(model, trainer) -> dict[str, np.ndarray]:
    arrays = {f"param.{n}": p.data for n, p in model.named_parameters()}
    hippo = model.hippo
    if hippo is not None:
        mem = hippo.memory
        arrays["memory.keys"] = mem.keys
        arrays["memory.values"] = mem.values
        arrays["hippo.W_K_write"] = hippo.W_K_write
        arrays["hippo.W_V_write"] = hippo.W_V_write
        for n, a in hippo.slow.items():
            arrays[f"hippo.slow.{n}"] = a
    arrays["replay.recent"] = model.replay.recent
    arrays["replay.long"] = model.replay.long
    if trainer is not None:
        arrays.update(trainer.opt.arrays())
    return arrays


def _fname(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_checkpoint(path, model, trainer=None) -> Path:
    """Write atomically: build in a sibling temp directory, then swap it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if model.hippo is not None and model.hippo.queue:
        raise CheckpointError("cannot checkpoint with pending memory writes; save at a step boundary")
    arrays = _collect_arrays(model, trainer)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp", dir=path.parent))
    try:
        entries = {}
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
            (tmp / _fname(name)).write_bytes(raw)
            entries[name] = dict(file=_fname(name), shape=list(arr.shape), dtype=str(arr.dtype),
                                 sha256=hashlib.sha256(raw).hexdigest())
        hippo = model.hippo
        manifest = dict(
            format=FORMAT_VERSION,
            config=model.cfg.to_dict(),
            step=trainer.step if trainer is not None else 0,
            adam_t=trainer.opt.t if trainer is not None else 0,
            training=model.training,
            lambda_rep=model.lambda_rep, rho_long=model.rho_long, B_R=model.B_R,
            memory=(dict(tau=hippo.memory.tau, ptr=hippo.memory.ptr, count=hippo.memory.count)
                    if hippo is not None else None),
            replay=model.replay.state(),
            dropout_rng=[c._dropout_rng.get_state() for c in model.columns],
            controller=trainer.controller.state() if trainer is not None else None,
            arrays=entries,
        )
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        old = None
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_array(path: Path, name: str, entry: dict) -> np.ndarray:
    f = path / entry["file"]
    if not f.exists():
        raise CheckpointError(f"array {name!r}: file {f.name} is missing")
    raw = f.read_bytes()
    if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
        raise CheckpointError(f"array {name!r}: checksum mismatch in {f.name}")
    n = int(np.prod(entry["shape"])) if entry["shape"] else 1
    if len(raw) != n * 8:
        raise CheckpointError(f"array {name!r}: expected {n * 8} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=_LE_F64).reshape(entry["shape"])
    return arr.astype(entry["dtype"]) if entry["dtype"] != "float64" else arr.copy()


def load_checkpoint(path):
    """Rebuild (model, trainer) from a checkpoint directory."""
    from .net import CortexNet
    from .training import Trainer

    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"{path}: manifest.json not found")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from exc
    cfg = ModelConfig.from_dict(manifest["config"])
    model = CortexNet(cfg)
    trainer = Trainer(model)
    entries = manifest["arrays"]

    def get(name):
        if name not in entries:
            raise CheckpointError(f"array {name!r}: not listed in manifest")
        return _read_array(path, name, entries[name])

    for n, p in model.named_parameters():
        arr = get(f"param.{n}")
        if arr.shape != p.shape:
            raise CheckpointError(f"array 'param.{n}': shape {arr.shape} does not match model {p.shape}")
        p.data = arr
    hippo = model.hippo
    if hippo is not None:
        mem = hippo.memory
        mem.keys[...] = get("memory.keys")
        mem.values[...] = get("memory.values")
        hippo.W_K_write[...] = get("hippo.W_K_write")
        hippo.W_V_write[...] = get("hippo.W_V_write")
        for n in hippo.slow:
            hippo.slow[n][...] = get(f"hippo.slow.{n}")
        mem.tau = float(manifest["memory"]["tau"])
        mem.ptr = int(manifest["memory"]["ptr"])
        mem.count = int(manifest["memory"]["count"])
    model.replay.load_state(manifest["replay"], {"recent": get("replay.recent"), "long": get("replay.long")})
    for c, st in zip(model.columns, manifest["dropout_rng"]):
        c._dropout_rng.set_state(st)
    model.lambda_rep = float(manifest["lambda_rep"])
    model.rho_long = float(manifest["rho_long"])
    model.B_R = int(manifest["B_R"])
    if manifest.get("training", True):
        model.train()
    else:
        model.eval()
    trainer.step = int(manifest["step"])
    trainer.opt.t = int(manifest["adam_t"])
    for n in trainer.opt.names:
        if f"adam.m.{n}" in entries:
            trainer.opt.m[n][...] = get(f"adam.m.{n}")
            trainer.opt.v[n][...] = get(f"adam.v.{n}")
    if manifest.get("controller") is not None:
        trainer.controller.load_state(manifest["controller"])
    return model, trainer


def state_digest(model, trainer=None) -> str:
    """sha256 over every persisted array plus the memory, replay, and control scalars."""
    h = hashlib.sha256()
    for name, arr in sorted(_collect_arrays(model, trainer).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    mem = model.hippo.memory if model.hippo is not None else None
    scalars = dict(
        memory=(mem.tau, mem.ptr, mem.count) if mem is not None else None,
        replay=model.replay.state(),
        control=(model.lambda_rep, model.rho_long, model.B_R),
        controller=trainer.controller.state() if trainer is not None else None,
    )
    h.update(json.dumps(scalars, sort_keys=True, default=repr).encode())
    return h.hexdigest()
