"""
Synthetic byte-level task stream and the schedule runner.

Three seeded sources with distinct statistics stand in for a sequence of corpora:
prose-like pseudo-words with bigram structure, tag-structured markup, and short
arithmetic word problems. Tokens are raw bytes (0..255) plus two specials.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tf
from .checkpoint import save_checkpoint
from .clmetrics import MetricsLog, TaskTracker, is_undefined
from .config import RunConfig
from .net import CortexNet
from .training import Trainer

BOS = 256
SEP = 257
VOCAB = 258
IGNORE = -100

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _make_lexicon(rng: np.random.Generator, n: int, lo: int, hi: int, alphabet: str) -> list[str]:
    words = set()
    while len(words) < n:
        k = int(rng.integers(lo, hi + 1))
        words.add("".join(alphabet[i] for i in rng.integers(0, len(alphabet), k)))
    return sorted(words)


def _zipf_probs(n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** s
    return p / p.sum()


class ProseSource:
    """Pseudo-words with Zipf unigram frequencies and a sparse preferred-successor table."""

    def __init__(self, rng: np.random.Generator):
        self.words = _make_lexicon(rng, 400, 2, 8, _LETTERS)
        n = len(self.words)
        self.p = _zipf_probs(n, 1.1)
        self.succ = rng.integers(0, n, size=(n, 4))

    def document(self, rng: np.random.Generator, n_chars: int) -> str:
        out, size = [], 0
        w = int(rng.choice(len(self.words), p=self.p))
        cap = True
        while size < n_chars:
            word = self.words[w]
            if cap:
                word = word.capitalize()
            cap = False
            r = rng.random()
            if r < 0.08:
                word += "."
                cap = True
            elif r < 0.14:
                word += ","
            out.append(word)
            size += len(word) + 1
            if rng.random() < 0.7:
                w = int(self.succ[w, rng.integers(0, 4)])
            else:
                w = int(rng.choice(len(self.words), p=self.p))
        return " ".join(out)


class MarkupSource:
    """Nested tags with attributes and short uppercase text nodes."""

    TAGS = ("div", "span", "ul", "li", "p", "a", "td", "tr")

    def __init__(self, rng: np.random.Generator):
        self.attrs = _make_lexicon(rng, 12, 2, 5, _LETTERS)
        self.vals = _make_lexicon(rng, 30, 1, 6, _LETTERS + "-_")
        self.text = _make_lexicon(rng, 60, 2, 6, _LETTERS.upper())

    def _element(self, rng, depth: int, parts: list):
        tag = self.TAGS[int(rng.integers(0, len(self.TAGS)))]
        ind = "  " * depth
        attr = ""
        if rng.random() < 0.6:
            attr = f' {self.attrs[int(rng.integers(0, len(self.attrs)))]}="{self.vals[int(rng.integers(0, len(self.vals)))]}"'
        parts.append(f"{ind}<{tag}{attr}>\n")
        if depth < 3 and rng.random() < 0.55:
            for _ in range(int(rng.integers(1, 3))):
                self._element(rng, depth + 1, parts)
        else:
            words = " ".join(self.text[int(i)] for i in rng.integers(0, len(self.text), int(rng.integers(1, 4))))
            parts.append(f"{ind}  {words}\n")
        parts.append(f"{ind}</{tag}>\n")

    def document(self, rng: np.random.Generator, n_chars: int) -> str:
        parts: list[str] = []
        while sum(map(len, parts)) < n_chars:
            self._element(rng, 0, parts)
        return "".join(parts)


class ArithmeticSource:
    """Short word problems with worked answers."""

    NAMES = ("Ana", "Bo", "Cy", "Dee", "Eli", "Fay", "Gus", "Hal")
    ITEMS = ("apples", "pens", "books", "coins", "cards", "shells")

    def __init__(self, rng: np.random.Generator):
        self.order = rng.permutation(4)

    def _problem(self, rng) -> str:
        name = self.NAMES[int(rng.integers(0, len(self.NAMES)))]
        item = self.ITEMS[int(rng.integers(0, len(self.ITEMS)))]
        a, b = (int(v) for v in rng.integers(2, 99, size=2))
        kind = int(self.order[int(rng.integers(0, 4))])
        if kind == 0:
            q, ans = f"{name} has {a} {item} and gets {b} more. How many {item}?", f"{a}+{b}={a + b}"
        elif kind == 1:
            a, b = max(a, b), min(a, b)
            q, ans = f"{name} has {a} {item} and gives away {b}. How many left?", f"{a}-{b}={a - b}"
        elif kind == 2:
            a, b = a % 12 + 2, b % 12 + 2
            q, ans = f"{name} buys {a} bags of {b} {item}. How many {item}?", f"{a}*{b}={a * b}"
        else:
            c = int(rng.integers(2, 40))
            q, ans = f"{name} has {a} {item}, finds {b}, loses {c}. Total?", f"{a}+{b}-{c}={a + b - c}"
        return f"Q: {q}\nA: {ans}\n#### {eval_answer(ans)}\n"

    def document(self, rng: np.random.Generator, n_chars: int) -> str:
        parts: list[str] = []
        while sum(map(len, parts)) < n_chars:
            parts.append(self._problem(rng))
        return "".join(parts)


def eval_answer(expr: str) -> str:
    return expr.split("=")[-1]


@dataclass
class TaskSpec:
    name: str
    source: object
    steps: int
    val_size: int = 4
    control_size: int = 8

    def document(self, rng: np.random.Generator, n_chars: int) -> str:
        return self.source.document(rng, n_chars)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    task_id: int


def make_tasks(seed: int, budgets=(600, 600, 120), val_size: int = 4, control_size: int = 8) -> list[TaskSpec]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    sources = [("prose", ProseSource(rng)), ("markup", MarkupSource(rng)), ("arith", ArithmeticSource(rng))]
    return [TaskSpec(n, s, int(b), val_size, control_size) for (n, s), b in zip(sources, budgets)]


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def next_batch(spec: TaskSpec, rng: np.random.Generator, b: int, t: int, task_id: int = 0) -> Batch:
    """Fresh [b, t] batch: BOS, then a window of a newly generated document; labels are x shifted left."""
    x = np.empty((b, t), dtype=np.int64)
    for i in range(b):
        doc = encode(spec.document(rng, 2 * t + 32))
        start = int(rng.integers(0, max(1, len(doc) - t)))
        x[i, 0] = BOS
        x[i, 1:] = doc[start:start + t - 1]
    y = np.empty_like(x)
    y[:, :-1] = x[:, 1:]
    y[:, -1] = IGNORE
    return Batch(x, np.ascontiguousarray(y), task_id)


def fixed_batches(spec: TaskSpec, seed: int, task_id: int, kind: int, n: int, b: int, t: int) -> list[Batch]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, task_id, kind]))
    return [next_batch(spec, rng, b, t, task_id) for _ in range(n)]


def evaluate(model: CortexNet, batches: list[Batch]) -> tuple[float, float]:
    """Perplexity and teacher-forced token accuracy over labelled positions."""
    model.eval()
    nll = 0.0
    correct = 0
    count = 0
    with tf.no_grad():
        for bt in batches:
            logits, _ = model.forward(bt.x)
            z = logits.data
            mask = bt.y != IGNORE
            zmax = z.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
            lab = np.where(mask, bt.y, 0)
            lp = np.take_along_axis(z, lab[..., None], axis=-1)[..., 0] - lse
            nll -= float(lp[mask].sum())
            correct += int((z.argmax(axis=-1) == bt.y)[mask].sum())
            count += int(mask.sum())
    model.train()
    return math.exp(nll / count), correct / count


def unigram_kl(a: np.ndarray, b: np.ndarray, vocab: int = VOCAB, smooth: float = 1.0) -> float:
    pa = np.bincount(a.reshape(-1), minlength=vocab) + smooth
    pb = np.bincount(b.reshape(-1), minlength=vocab) + smooth
    pa, pb = pa / pa.sum(), pb / pb.sum()
    return float(np.sum(pa * np.log(pa / pb)))


@dataclass
class RunArtifacts:
    tracker: TaskTracker
    metrics: MetricsLog
    controller_log: list
    train_log: list
    trainer: Trainer
    tokens_per_sec: float
    final_aufc: float


def run_schedule(model: CortexNet, tasks: list[TaskSpec], rc: RunConfig, out_dir: str | Path | None = None,
                 log: Callable[[str], None] | None = None) -> RunArtifacts:
    """Train the tasks in order with boundary bookkeeping, periodic evaluation, and control."""
    b, t = rc.batch_size, rc.seq_len
    cfg = model.cfg
    val = [fixed_batches(s, rc.data_seed, k, 1, rc.eval_batches, b, t) for k, s in enumerate(tasks)]
    ctrl_sets = [fixed_batches(s, rc.data_seed, k, 2, rc.control_subset, b, t) for k, s in enumerate(tasks)]
    train_rngs = [np.random.default_rng(np.random.SeedSequence([rc.data_seed, k, 0])) for k in range(len(tasks))]
    tracker = TaskTracker()
    metrics = MetricsLog()
    state = {"task": 0, "calls": 0}
    done_evals: set = set()
    seen_steps: set = set()

    def control_fn(m: CortexNet):
        cur = state["task"]
        n_use = cfg.ctrl_batches
        offset = (state["calls"] * n_use) % rc.control_subset
        state["calls"] += 1
        measured = {}
        for k in range(cur + 1):
            sel = [ctrl_sets[k][(offset + i) % rc.control_subset] for i in range(n_use)]
            measured[k] = evaluate(m, sel)[0]
        if cfg.ctrl_p_sel == "current":
            p_sel = measured[cur]
        else:
            p_sel = math.exp(float(np.mean([math.log(p) for p in measured.values()])))
        return cur, measured, p_sel

    trainer = Trainer(model, control_fn, use_controller=rc.controller)

    def eval_task(k: int, step: int):
        key = (k, step)
        if key in done_evals:
            return tracker.tasks[k].history[-1][1]
        done_evals.add(key)
        ppl, acc = evaluate(model, val[k])
        tracker.record_eval(k, step, ppl)
        metrics.add(step, k, "ppl", ppl)
        metrics.add(step, k, "logppl", math.log(ppl))
        metrics.add(step, k, "acc", acc)
        return math.log(ppl)

    def eval_seen(upto: int, step: int):
        if step in seen_steps:
            return
        seen_steps.add(step)
        for k in range(upto + 1):
            eval_task(k, step)
            rec = tracker.tasks[k]
            if rec.post is not None:
                metrics.add(step, k, "forgetting", tracker.forgetting(k))
                metrics.add(step, k, "aufc", rec.aufc)
        bwt = tracker.bwt(upto)
        if not is_undefined(bwt):
            metrics.add(step, "all", "bwt", bwt)
        agg = tracker.aggregate_aufc()
        if not is_undefined(agg):
            metrics.add(step, "all", "aufc", agg)

    # step 0: untrained baseline on every task
    for k in range(len(tasks)):
        ppl, _ = evaluate(model, val[k])
        tracker.record_base(k, ppl, 0)
        metrics.add(0, k, "base", math.log(ppl))
    train_log: list = []
    train_time = 0.0
    train_tokens = 0
    step = 0
    for k, spec in enumerate(tasks):
        state["task"] = k
        eval_task(k, step)
        tracker.record_pre(k, math.exp(tracker.at(k, step)), step)
        metrics.add(step, k, "pre", tracker.tasks[k].pre)
        if k > 0 and cfg.ctrl_reset_on_task:
            trainer.controller.reset_integral()
        for _ in range(spec.steps):
            mbs = []
            for _ in range(cfg.grad_accum):
                bt = next_batch(spec, train_rngs[k], b, t, k)
                mbs.append((bt.x, bt.y))
            t0 = time.perf_counter()
            rep = trainer.train_step(mbs)
            train_time += time.perf_counter() - t0
            train_tokens += b * t * cfg.grad_accum
            step = rep.step
            train_log.append(dict(step=step, task=k, lr=rep.lr, grad_norm=rep.grad_norm, **rep.losses,
                                  writes=rep.writes, mem_count=rep.mem_count, queue_before_flush=rep.queue_before_flush,
                                  queue_after_flush=rep.queue_after_flush,
                                  **{f"hippo_{n}": v for n, v in rep.hippo.items()}, **rep.replay))
            if step % rc.eval_every == 0:
                eval_seen(k, step)
            if rc.checkpoint_every and out_dir is not None and step % rc.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"checkpoint_{step}", model, trainer)
            if log and step % max(1, rc.eval_every) == 0:
                log(f"step {step} task {spec.name} loss {rep.losses['loss']:.4f} mem {rep.mem_count}")
        # task boundary: evaluate all seen tasks, then the post score of this task
        eval_seen(k, step)
        ppl_post = math.exp(tracker.at(k, step))
        tracker.record_post(k, step, ppl_post)
        metrics.add(step, k, "post", tracker.tasks[k].post)
        ctrl_ppl = evaluate(model, ctrl_sets[k])[0]
        trainer.controller.record_post_task(k, ctrl_ppl)
    fwt = tracker.fwt()
    metrics.add(step, "all", "fwt", fwt)
    final_aufc = tracker.aggregate_aufc()
    metrics.add(step, "all", "final_aufc", final_aufc)
    tps = train_tokens / train_time if train_time > 0 else 0.0
    arts = RunArtifacts(tracker, metrics, [r.as_dict() for r in trainer.controller.history], train_log,
                        trainer, tps, final_aufc)
    if out_dir is not None:
        write_run_files(Path(out_dir), rc, arts, model)
    return arts


def write_run_files(out: Path, rc: RunConfig, arts: RunArtifacts, model: CortexNet) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(arts.metrics.to_csv())
    (out / "metrics.jsonl").write_text(arts.metrics.to_jsonl())
    with open(out / "controller.jsonl", "w") as fh:
        for r in arts.controller_log:
            fh.write(json.dumps(r) + "\n")
    with open(out / "train.jsonl", "w") as fh:
        for r in arts.train_log:
            fh.write(json.dumps(r) + "\n")
    (out / "throughput.json").write_text(json.dumps({"tokens_per_sec": arts.tokens_per_sec}) + "\n")
    save_checkpoint(out / "checkpoint", model, arts.trainer)


def output_root() -> Path:
    return Path(os.environ.get("CORTEXNET_OUT", "runs"))
