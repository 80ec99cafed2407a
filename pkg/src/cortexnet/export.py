"""Turn a run directory into per-series CSV files plus PNG figures."""

from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from pathlib import Path

from . import plotting
from .clmetrics import read_metrics_csv
from .errors import InputError

# column set of every exported CSV
EXPORT_SCHEMA = {
    "logppl.csv": ("step", "task", "logppl"),
    "forgetting.csv": ("step", "task", "forgetting"),
    "aufc.csv": ("step", "task", "aufc"),
    "surprise.csv": ("step", "task", "mean_surprise", "max_surprise", "threshold"),
    "write_fractions.csv": ("step", "task", "keep_frac_topk", "write_frac_raw", "n_write", "mem_count"),
    "controller.csv": ("step", "f_bar", "e", "integral", "lambda_rep", "rho_long", "b_r"),
}
FIGURES = ("logppl.png", "forgetting.png", "aufc.png", "memory.png", "controller.png")
REQUIRED = ("metrics.csv", "train.jsonl")


def _jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metric_rows(rows, metric):
    return [(r["step"], r["task"], r["value"]) for r in rows if r["metric"] == metric]


def _by_task(triples) -> dict:
    out: dict = {}
    for step, task, v in triples:
        s, vals = out.setdefault(task, ([], []))
        s.append(step)
        vals.append(v)
    return out


def export_run(run_dir, out_dir=None) -> Path:
    """Write the series and figures of ``run_dir`` into ``out_dir`` (default ``run_dir/export``).

    The output directory is built under a temporary name and renamed at the end, so a
    failure never leaves partial files behind.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise InputError(f"{run_dir}: run directory does not exist")
    missing = [f for f in REQUIRED if not (run_dir / f).exists()]
    if missing:
        raise InputError(f"{run_dir}: missing {', '.join(missing)}")
    metrics = read_metrics_csv(run_dir / "metrics.csv")
    if not metrics:
        raise InputError(f"{run_dir}/metrics.csv has no rows")
    train = _jsonl(run_dir / "train.jsonl")
    ctrl = _jsonl(run_dir / "controller.jsonl")

    out_dir = Path(out_dir) if out_dir is not None else run_dir / "export"
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".tmp", dir=out_dir.parent))
    try:
        boundaries = sorted({r["step"] for r in metrics if r["metric"] == "post"})
        series = {}
        for name in ("logppl", "forgetting", "aufc"):
            rows = _metric_rows(metrics, name)
            _write_csv(tmp / f"{name}.csv", EXPORT_SCHEMA[f"{name}.csv"], rows)
            series[name] = _by_task(rows)

        surprise = [(r["step"], r["task"], r.get("hippo_mean_surprise", 0.0), r.get("hippo_max_surprise", 0.0),
                     r.get("hippo_last_thr", 0.0)) for r in train]
        writes = [(r["step"], r["task"], r.get("hippo_keep_frac_topk", 0.0), r.get("hippo_write_frac_raw", 0.0),
                   r.get("writes", 0), r.get("mem_count", 0)) for r in train]
        _write_csv(tmp / "surprise.csv", EXPORT_SCHEMA["surprise.csv"], surprise)
        _write_csv(tmp / "write_fractions.csv", EXPORT_SCHEMA["write_fractions.csv"], writes)
        ctrl_cols = EXPORT_SCHEMA["controller.csv"]
        _write_csv(tmp / "controller.csv", ctrl_cols, [tuple(r[c] for c in ctrl_cols) for r in ctrl])

        plotting.per_task_lines(series["logppl"], "validation log-perplexity", tmp / "logppl.png",
                                boundaries=boundaries)
        plotting.per_task_lines(series["forgetting"], "forgetting (log-ppl above post)", tmp / "forgetting.png",
                                boundaries=boundaries)
        plotting.per_task_lines(series["aufc"], "cumulative AUFC", tmp / "aufc.png", boundaries=boundaries)
        steps = [r[0] for r in surprise]
        plotting.stacked_panels(steps, {
            "surprise": {"mean": [r[2] for r in surprise], "max": [r[3] for r in surprise],
                         "threshold": [r[4] for r in surprise]},
            "write fraction": {"kept by top fraction": [r[2] for r in writes],
                               "above threshold": [r[3] for r in writes]},
            "memory slots used": {"count": [r[5] for r in writes]},
        }, tmp / "memory.png", boundaries=boundaries)
        plotting.stacked_panels([r["step"] for r in ctrl], {
            "lambda_rep": {"lambda_rep": [r["lambda_rep"] for r in ctrl]},
            "replay batch": {"B_R": [r["b_r"] for r in ctrl]},
            "long fraction": {"rho_long": [r["rho_long"] for r in ctrl]},
        }, tmp / "controller.png", boundaries=boundaries)

        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir
