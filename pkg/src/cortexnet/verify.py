"""
Causality and state-semantics battery.

Every check works on a fresh deep copy of the model it is handed (parameters and all
buffers), so checks never influence each other.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tf
from .config import ModelConfig
from .errors import InputError
from .net import CortexNet, grad_coverage_check
from .training import Trainer

THRESHOLD = 1e-9


@dataclass
class CheckReport:
    name: str
    passed: bool
    measured: float
    threshold: float
    details: str = ""
    status: str = ""

    def __post_init__(self):
        if not self.status:
            self.status = "pass" if self.passed else "fail"

    def as_dict(self) -> dict:
        return asdict(self)


def _le(name, measured, threshold, details="") -> CheckReport:
    return CheckReport(name, bool(measured <= threshold), float(measured), threshold, details)


def _exact(name, ok: bool, details="", measured: float = 0.0) -> CheckReport:
    return CheckReport(name, bool(ok), float(measured), 0.0, details)


def shifted_targets(x: np.ndarray) -> np.ndarray:
    y = np.full_like(x, -100)
    y[:, :-1] = x[:, 1:]
    return y


def _perturb_suffix(x: np.ndarray, t: int, vocab: int, rng: np.random.Generator) -> np.ndarray:
    xt = x.copy()
    n = x.shape[1] - (t + 1)
    if n > 0:
        xt[:, t + 1:] = rng.integers(0, vocab, size=(x.shape[0], n))
    return xt


def check_forward_causality(model: CortexNet, x: np.ndarray, t: int, mode: str = "eval",
                            rng: np.random.Generator | None = None) -> CheckReport:
    """Max |logits[:, t]| change when every token after t is redrawn."""
    rng = rng or np.random.default_rng(0)
    m = model.clone()
    xt = _perturb_suffix(x, t, m.cfg.V, rng)
    if mode == "eval":
        m.eval()
        with tf.no_grad():
            a = m.forward(x)[0].data[:, t]
            b = m.forward(xt)[0].data[:, t]
    else:
        # training mode with targets queues writes; no flush happens between the two passes
        m.train()
        with tf.no_grad():
            a = m.forward(x, targets=shifted_targets(x))[0].data[:, t]
            b = m.forward(xt, targets=shifted_targets(xt))[0].data[:, t]
    return _le(f"forward_causality_{mode}", float(np.max(np.abs(a - b))), THRESHOLD, f"t={t}")


def check_gradient_causality(model: CortexNet, x: np.ndarray, t: int) -> CheckReport:
    """Largest embedding-gradient entry at positions after t for z_t = sum of logits at t."""
    m = model.clone().eval()
    e = tf.Tensor(m.embedding.data[x], requires_grad=True)
    logits, _ = m.forward(x, embeddings=e)
    z = tf.tsum(logits[:, t, :])
    tf.backward(z)
    g = e.grad
    suffix = float(np.max(np.abs(g[:, t + 1:]))) if t + 1 < x.shape[1] else 0.0
    prefix = float(np.max(np.abs(g[:, : t + 1])))
    return CheckReport("gradient_causality", suffix == 0.0, suffix, 0.0,
                       f"t={t}; max prefix gradient {prefix:.3e}")


def check_prefix_consistency(model: CortexNet, x: np.ndarray, t: int) -> CheckReport:
    m = model.clone().eval()
    with tf.no_grad():
        full = m.forward(x)[0].data[:, t]
        pre = m.forward(x[:, : t + 1])[0].data[:, -1]
    return _le("prefix_consistency", float(np.max(np.abs(full - pre))), THRESHOLD, f"t={t}")


def check_write_score_causality(model: CortexNet, x: np.ndarray, t: int,
                                rng: np.random.Generator | None = None) -> CheckReport:
    """Queued surprise at positions <= t must not move when token t+1 changes."""
    rng = rng or np.random.default_rng(1)
    if model.hippo is None:
        return CheckReport("write_score_causality", True, 0.0, THRESHOLD, "hippocampus disabled", "n/a")
    xt = x.copy()
    if t + 1 < x.shape[1]:
        xt[:, t + 1] = (x[:, t + 1] + 1 + rng.integers(0, model.cfg.V - 1, size=x.shape[0])) % model.cfg.V
    scores = []
    for seq in (x, xt):
        m = model.clone().train()
        m.hippo.clear_pending()
        with tf.no_grad():
            m.forward(seq, targets=shifted_targets(seq))
        scores.append(m.hippo.queue[-1].surprise)
    a, b = scores
    prefix = float(np.max(np.abs(a[:, : t + 1] - b[:, : t + 1])))
    nxt = float(np.max(np.abs(a[:, t + 1] - b[:, t + 1]))) if t + 1 < x.shape[1] else 0.0
    return _le("write_score_causality", prefix, THRESHOLD, f"t={t}; change at t+1: {nxt:.3e}")


def _probe_logits(m: CortexNet, x) -> np.ndarray:
    m.eval()
    with tf.no_grad():
        return m.forward(x)[0].data


def check_state_semantics(model: CortexNet, x: np.ndarray) -> list[CheckReport]:
    out = []
    if model.hippo is None:
        return [CheckReport("state_semantics", True, 0.0, 0.0, "hippocampus disabled", "n/a")]
    y = shifted_targets(x)

    # a training micro-step without flush must not change what the next pass reads
    fresh = model.clone()
    pre = model.clone().train()
    n0 = pre.hippo.memory.count
    loss, _, _ = pre.total_loss(x, y)
    tf.backward(loss)
    queued = len(pre.hippo.queue)
    count_same = pre.hippo.memory.count == n0
    delta = float(np.max(np.abs(_probe_logits(pre, x) - _probe_logits(fresh, x))))
    out.append(CheckReport("no_preflush_effect", delta == 0.0 and count_same and queued > 0, delta, 0.0,
                           f"queued={queued}, count {n0}->{pre.hippo.memory.count}"))

    # an evaluation forward drops pending writes without committing them
    m = model.clone().train()
    with tf.no_grad():
        m.forward(x, targets=y)
    q_before, c_before = len(m.hippo.queue), m.hippo.memory.count
    logits_eval = _probe_logits(m, x)
    q_after, c_after = len(m.hippo.queue), m.hippo.memory.count
    same_logits = bool(np.array_equal(logits_eval, _probe_logits(model.clone(), x)))
    out.append(_exact("eval_clears_pending", q_before > 0 and q_after == 0 and c_before == c_after and same_logits,
                      f"queue {q_before}->{q_after}, count {c_before}->{c_after}, logits unchanged={same_logits}"))

    # two micro-steps: nothing committed after the first, queue empty after the step
    m = model.clone()
    m.cfg = m.cfg.replace(grad_accum=2)
    trainer = Trainer(m, use_controller=False)
    seen = {}

    def probe(i):
        seen[i] = (len(m.hippo.queue), m.hippo.memory.count)

    c0 = m.hippo.memory.count
    trainer.train_step([(x, y), (x, y)], on_micro_step=probe)
    q1, c1 = seen[0]
    q2, c2 = len(m.hippo.queue), m.hippo.memory.count
    out.append(_exact("flush_order_accumulation", q1 == 1 and c1 == c0 and q2 == 0 and c2 >= c0,
                      f"after micro-step 1: queue={q1} count={c1}; after step: queue={q2} count={c2}"))
    return out


def check_memory_persistence(model: CortexNet, x: np.ndarray, max_steps: int = 8,
                             rng: np.random.Generator | None = None) -> tuple[CheckReport, CortexNet | None]:
    """Train until a write lands, then confirm evaluation keeps it and reads see it."""
    if model.hippo is None:
        return CheckReport("memory_persistence", True, 0.0, 0.0, "hippocampus disabled", "n/a"), None
    rng = rng or np.random.default_rng(2)
    m = model.clone()
    trainer = Trainer(m, use_controller=False)
    steps = 0
    while m.hippo.memory.count == 0 and steps < max_steps:
        xb = rng.integers(0, m.cfg.V, size=x.shape)
        trainer.train_step([(xb, shifted_targets(xb))])
        steps += 1
    if m.hippo.memory.count == 0:
        return CheckReport("memory_persistence", False, 0.0, 0.0,
                           f"no write committed within {max_steps} steps", "inconclusive"), None
    n_train = m.hippo.memory.count
    m.eval()
    with tf.no_grad():
        _, aux_w = m.forward(x)
    n_eval = m.hippo.memory.count
    fresh = model.clone().eval()
    with tf.no_grad():
        _, aux_f = fresh.forward(x)
        _, aux_f2 = fresh.clone().forward(x)
    d_read = float(np.max(np.abs(aux_w.readout.data - aux_f.readout.data)))
    control = float(np.max(np.abs(aux_f2.readout.data - aux_f.readout.data)))
    ok = n_eval == n_train > 0 and d_read > 0 and control == 0.0
    return CheckReport("memory_persistence", ok, d_read, 0.0,
                       f"count train={n_train} eval={n_eval}; delta_read={d_read:.3e}; fresh control={control}"), m


def check_replay_semantics(model: CortexNet, x: np.ndarray) -> CheckReport:
    m = model.clone()
    stores = m.replay
    b, t = x.shape
    r0, l0 = stores.counts()
    m.train()
    with tf.no_grad():
        m.forward(x, targets=shifted_targets(x))
    r1, l1 = stores.counts()
    m.eval()
    with tf.no_grad():
        m.forward(x)
    r2, l2 = stores.counts()
    if not m.cfg.replay_active:
        ok = (r0, l0) == (r1, l1) == (r2, l2)
        return _exact("replay_semantics", ok, "replay disabled; stores must stay untouched")
    expect = b * (t // m.cfg.L_R)
    grew = (r1 - r0 == min(expect, stores.n_recent - r0)) if expect else (r1 == r0)
    ok = r1 >= r0 and l1 >= l0 and grew and (r2, l2) == (r1, l1)
    return _exact("replay_semantics", ok,
                  f"train: recent {r0}->{r1}, long {l0}->{l1}; eval: recent {r1}->{r2}, long {l1}->{l2}")


def check_target_layout(model: CortexNet, x: np.ndarray) -> CheckReport:
    m = model.clone().train()
    wide = np.zeros((x.shape[0], 2 * x.shape[1]), dtype=x.dtype)
    wide[:, ::2] = shifted_targets(x)
    try:
        m.forward(x, targets=wide[:, ::2])
    except InputError as exc:
        return _exact("noncontiguous_targets_rejected", True, str(exc))
    return _exact("noncontiguous_targets_rejected", False, "strided targets were accepted")


def graph_coverage(model: CortexNet, x: np.ndarray) -> CheckReport:
    """Informational: parameters reached by one backward pass of the full objective."""
    m = model.clone().train()
    m.replay.begin_step()
    x_rep = m.replay.sample(2, 0.5) if m.cfg.replay_active and m.replay.counts()[0] else None
    loss, _, _ = m.total_loss(x, shifted_targets(x), x_rep)
    tf.backward(loss)
    covered, uncovered = grad_coverage_check(m)
    return CheckReport("graph_coverage", True, float(len(uncovered)), float(len(covered) + len(uncovered)),
                       f"{len(covered)} covered; uncovered: {', '.join(uncovered) or 'none'}", "info")


def random_config(seed: int) -> ModelConfig:
    """A small random architecture for running the battery beyond the reference size."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    h_kv = int(rng.choice([1, 2]))
    h = h_kv * int(rng.choice([1, 2]))
    d = h * int(rng.choice([4, 8]))
    e = int(rng.integers(2, 5))
    g = int(rng.choice([1, 2]))
    return ModelConfig(
        d=d, L=int(rng.integers(2, 5)), h=h, h_kv=h_kv, E=e, k_E=int(rng.integers(1, e + 1)),
        d_ff=int(rng.choice([16, 32])), r=4 * g, G=g, N_s=int(rng.choice([16, 64])),
        d_k=int(rng.choice([8, 16])), k_H=int(rng.choice([2, 4])), S_max=int(rng.choice([8, 32])),
        chunk=int(rng.choice([3, 8])), k_W=int(rng.integers(1, 6)), L_R=4, N_recent=32, N_long=32,
        seed=seed,
    )


def probe_positions(t: int) -> list[int]:
    return sorted({0, t // 3, (2 * t) // 3, t - 1})


def run_battery(cfg: ModelConfig, batch: int = 2, seq_len: int = 16, fault: str | None = None,
                probe_seed: int = 0) -> list[CheckReport]:
    model = CortexNet(cfg)
    inject_fault(model, fault)
    rng = np.random.default_rng(probe_seed)
    x = rng.integers(0, cfg.V, size=(batch, seq_len))
    reports: list[CheckReport] = []
    ts = probe_positions(seq_len)
    reports.append(_worst([check_forward_causality(model, x, t, "eval", rng) for t in ts]))
    reports.append(_worst([check_forward_causality(model, x, t, "train", rng) for t in ts]))
    reports.append(_worst([check_gradient_causality(model, x, t) for t in ts]))
    reports.append(_worst([check_prefix_consistency(model, x, t) for t in ts]))
    reports.append(_worst([check_write_score_causality(model, x, t, rng) for t in ts]))
    reports.extend(check_state_semantics(model, x))
    persist, written = check_memory_persistence(model, x, rng=rng)
    reports.append(persist)
    if written is not None:
        # reads from a non-empty memory must keep the logits path causal
        r1 = _worst([check_prefix_consistency(written, x, t) for t in ts])
        r1.name = "prefix_consistency_with_memory"
        r2 = _worst([check_forward_causality(written, x, t, "eval", rng) for t in ts])
        r2.name = "forward_causality_with_memory"
        reports.extend([r1, r2])
    reports.append(check_replay_semantics(model, x))
    reports.append(check_target_layout(model, x))
    reports.append(graph_coverage(written if written is not None else model, x))
    return reports


def _worst(reports: list[CheckReport]) -> CheckReport:
    worst = max(reports, key=lambda r: (not r.passed, r.measured))
    ts = ",".join(r.details.split(";")[0].replace("t=", "") for r in reports)
    worst.details = f"{worst.details} (probed t in {{{ts}}})"
    return worst


def inject_fault(model: CortexNet, fault: str | None) -> None:
    if fault is None:
        return
    if fault == "broken_mask":
        for c in model.columns:
            c._broken_mask = True
    elif fault == "noncausal_mean":
        if not model.routers:
            raise ValueError("noncausal_mean fault needs the thalamic router")
        for r in model.routers:
            r._noncausal = True
    else:
        raise ValueError(f"unknown fault fixture {fault!r}")


def all_passed(reports: list[CheckReport]) -> bool:
    return all(r.passed or r.status in ("info", "n/a") for r in reports)


def format_table(reports: list[CheckReport]) -> str:
    w = max(len(r.name) for r in reports)
    lines = [f"{'check':<{w}}  {'status':<12}  {'measured':>11}  {'threshold':>9}  details"]
    for r in reports:
        lines.append(f"{r.name:<{w}}  {r.status:<12}  {r.measured:>11.3e}  {r.threshold:>9.1e}  {r.details}")
    return "\n".join(lines)


def report_json(reports: list[CheckReport], cfg: ModelConfig, seed: int) -> str:
    return json.dumps(dict(seed=seed, config=cfg.to_dict(), all_passed=all_passed(reports),
                           checks=[r.as_dict() for r in reports]), indent=2, allow_nan=False)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["seed", "config", "all_passed", "checks"],
    "properties": {
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "all_passed": {"type": "boolean"},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "measured", "threshold", "details", "status"],
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "measured": {"type": "number"},
                    "threshold": {"type": "number"},
                    "details": {"type": "string"},
                    "status": {"enum": ["pass", "fail", "inconclusive", "info", "n/a"]},
                },
            },
        },
    },
}
