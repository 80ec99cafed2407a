"""Continual-learning measurement in log-perplexity space."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError

# emitted in place of a number when a quantity is not defined (e.g. BWT before any task ends)
UNDEFINED = float("nan")


def is_undefined(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)


@dataclass
class TaskRecord:
    base: float | None = None
    base_step: int | None = None
    pre: float | None = None
    pre_step: int | None = None
    post: float | None = None
    post_step: int | None = None
    history: list = field(default_factory=list)   # (step, u)
    aufc: float = 0.0
    last_point: tuple | None = None               # (step, F) of the previous trapezoid node
    aufc_terms: list = field(default_factory=list)


class TaskTracker:
    """Per-task baseline / pre / post / history scores with a running AUFC."""

    def __init__(self):
        self.tasks: dict = {}

    def _rec(self, task) -> TaskRecord:
        return self.tasks.setdefault(task, TaskRecord())

    @staticmethod
    def _u(ppl: float) -> float:
        if not ppl > 0:
            raise InputError(f"perplexity must be positive, got {ppl}")
        return math.log(ppl)

    def record_base(self, task, ppl: float, step: int = 0) -> None:
        rec = self._rec(task)
        rec.base, rec.base_step = self._u(ppl), step

    def record_pre(self, task, ppl: float, step: int = 0) -> None:
        rec = self._rec(task)
        rec.pre, rec.pre_step = self._u(ppl), step

    def record_post(self, task, step: int, ppl: float) -> None:
        rec = self._rec(task)
        rec.post = self._u(ppl)
        rec.post_step = step
        # the forgetting curve starts at the post point with F = 0
        rec.last_point = (step, 0.0)

    def record_eval(self, task, step: int, ppl: float) -> None:
        rec = self._rec(task)
        u = self._u(ppl)
        if rec.history and step <= rec.history[-1][0]:
            raise InputError(f"task {task!r}: eval step {step} not after {rec.history[-1][0]}")
        rec.history.append((step, u))
        if rec.post is not None and rec.last_point is not None and step > rec.last_point[0]:
            f = max(0.0, u - rec.post)
            s0, f0 = rec.last_point
            rec.aufc_terms.append(0.5 * (f0 + f) * (step - s0))
            # exactly rounded sum, so the result does not depend on how the terms were grouped
            rec.aufc = math.fsum(rec.aufc_terms)
            rec.last_point = (step, f)

    def current(self, task) -> float:
        rec = self.tasks[task]
        if not rec.history:
            raise ContractError(f"task {task!r} has no evaluations")
        return rec.history[-1][1]

    def forgetting(self, task, step: int | None = None) -> float:
        rec = self.tasks.get(task)
        if rec is None or rec.post is None:
            raise ContractError(f"task {task!r} has no post-task score")
        u = self.current(task) if step is None else self.at(task, step)
        return max(0.0, u - rec.post)

    def at(self, task, step: int) -> float:
        for s, u in self.tasks[task].history:
            if s == step:
                return u
        raise ContractError(f"task {task!r} was not evaluated at step {step}")

    def aufc(self, task) -> float:
        return self.tasks[task].aufc

    def aggregate_aufc(self) -> float:
        """Mean AUFC over tasks that have finished training."""
        vals = [r.aufc for r in self.tasks.values() if r.post is not None]
        return float(np.mean(vals)) if vals else UNDEFINED

    def bwt(self, current_task, step: int | None = None) -> float:
        past = [k for k, r in self.tasks.items() if k != current_task and r.post is not None]
        if not past:
            return UNDEFINED
        vals = []
        for k in past:
            u = self.current(k) if step is None else self.at(k, step)
            vals.append(self.tasks[k].post - u)
        return float(np.mean(vals))

    def fwt(self, tasks=None) -> float:
        keys = list(self.tasks) if tasks is None else list(tasks)
        vals = []
        for k in keys:
            rec = self.tasks.get(k)
            if rec is None or rec.base is None or rec.pre is None:
                raise ContractError(f"task {k!r} lacks a base or pre score")
            vals.append(rec.base - rec.pre)
        if not vals:
            raise ContractError("no tasks recorded")
        return float(np.mean(vals))

    def normalized_forgetting(self, task, drop: float) -> float:
        """drop / (post - base); undefined when the task gain is below 1e-9 in magnitude."""
        rec = self.tasks[task]
        if rec.post is None or rec.base is None:
            raise ContractError(f"task {task!r} lacks a base or post score")
        gain = rec.post - rec.base
        if abs(gain) < 1e-9:
            return UNDEFINED
        return drop / gain


def trapezoid_aufc(history: list, post: float, post_step: int) -> float:
    """One-shot trapezoid of max(0, u - post) over the history from ``post_step`` on."""
    pts = [(post_step, 0.0)] + [(s, max(0.0, u - post)) for s, u in history if s > post_step]
    if len(pts) < 2:
        return 0.0
    return math.fsum(0.5 * (f0 + f1) * (s1 - s0) for (s0, f0), (s1, f1) in zip(pts, pts[1:]))


def accuracy_forgetting(acc_post: float, acc_now: float) -> float:
    """Drop in a higher-is-better score from its post-task value, clamped at zero."""
    return max(0.0, acc_post - acc_now)


METRIC_COLUMNS = ("step", "task", "metric", "value")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class MetricsLog:
    """Long-format (step, task, metric, value) rows mirrored to CSV and JSONL."""

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, step: int, task, metric: str, value) -> None:
        self.rows.append((int(step), str(task), metric, float(value)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(x) for x in r])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = []
        for step, task, metric, value in self.rows:
            v = None if math.isnan(value) else value
            lines.append(json.dumps(dict(step=step, task=task, metric=metric, value=v)))
        return "\n".join(lines) + ("\n" if lines else "")

    def series(self, metric: str, task=None) -> list[tuple[int, float]]:
        return [(s, v) for s, t, m, v in self.rows if m == metric and (task is None or t == str(task))]


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["step"] = int(r["step"])
        r["value"] = float(r["value"])
    return rows
