"""
Command-line entry point.

Exit codes: 0 success, 1 a check or run failed, 2 usage error (bad flags, bad
configuration, unknown task, missing inputs).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, state_digest
from .clmetrics import MetricsLog
from .config import RunConfig, read_config_file, resolve_run_config, verification_config
from .errors import CheckpointError, ConfigError, InputError
from .export import export_run
from .net import CortexNet
from .stream import evaluate, fixed_batches, make_tasks, output_root, run_schedule
from .verify import all_passed, format_table, random_config, report_json, run_battery

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _cli_values(args) -> dict:
    vals = _parse_set(args.set)
    flags = dict(seed=args.seed, data_seed=args.data_seed, batch_size=args.batch_size, seq_len=args.seq_len,
                 eval_every=args.eval_every, eval_batches=args.eval_batches,
                 checkpoint_every=args.checkpoint_every, out_dir=args.out)
    if args.budgets is not None:
        flags["budgets"] = args.budgets
    for name in ("disable_thalamus", "disable_hippocampus", "disable_replay"):
        if getattr(args, name):
            flags[name] = True
    if args.no_controller:
        flags["controller"] = False
    vals.update({k: v for k, v in flags.items() if v is not None})
    return vals


def modulation_summary(model: CortexNet) -> dict:
    """Structural record of which signals reach the late columns."""
    return dict(
        thalamic_routers=len(model.routers),
        hippocampal_feedback=model.hippo is not None,
        replay=model.cfg.replay_active,
        late_layers_modulated=bool(model.routers) or model.hippo is not None,
        injection_layer=model.cfg.l_inj,
        parameters=model.num_parameters(),
    )


def build_header(rc: RunConfig, source: dict, model: CortexNet, argv) -> dict:
    return dict(
        version=__version__,
        argv=list(argv),
        run=rc.to_dict(),
        model=rc.model.to_dict(),
        source=source,
        derived=dict(d_h=rc.model.d_h, l_inj=rc.model.l_inj, replay_active=rc.model.replay_active),
        modulation=modulation_summary(model),
    )


def cmd_train(args, argv) -> int:
    file_vals = read_config_file(args.config) if args.config else {}
    rc, source = resolve_run_config(_cli_values(args), file_vals)
    out = Path(rc.out_dir) if source["out_dir"] != "default" else output_root() / f"seed{rc.model.seed}"
    rc.out_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    model = CortexNet(rc.model)
    header = build_header(rc, source, model, argv)
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    if log:
        log(f"run dir {out}; {header['modulation']['parameters']} parameters; budgets {rc.budgets}")
    t0 = time.perf_counter()
    arts = run_schedule(model, make_tasks(rc.data_seed, rc.budgets, rc.eval_batches, rc.control_subset),
                        rc, out, log)
    if log:
        log(f"done in {time.perf_counter() - t0:.1f}s; final AUFC {arts.final_aufc:.6g}; "
            f"{arts.tokens_per_sec:.0f} tokens/s")
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    configs = []
    base = dict(verification_config().to_dict())
    if args.config:
        base.update(read_config_file(args.config))
    for s in args.seeds:
        configs.append(("reference", s, verification_config(**{**base, "seed": s})))
    for s in range(args.random_configs):
        configs.append(("random", s, random_config(s)))
    ok = True
    reports_json = []
    for kind, seed, cfg in configs:
        reports = run_battery(cfg, batch=args.batch, seq_len=args.seq_len, fault=args.inject_bug, probe_seed=seed)
        passed = all_passed(reports)
        ok &= passed
        print(f"== {kind} config, seed {seed}: {'PASS' if passed else 'FAIL'}")
        print(format_table(reports))
        reports_json.append(json.loads(report_json(reports, cfg, seed)))
    if args.json:
        Path(args.json).write_text(json.dumps(reports_json, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def _task_index(name: str, names: list[str]) -> int:
    if name in names:
        return names.index(name)
    if name.isdigit() and int(name) < len(names):
        return int(name)
    raise UsageError(f"unknown task {name!r}; choose from {', '.join(names)}")


def cmd_eval(args, argv) -> int:
    ckpt = Path(args.checkpoint)
    run_dir = ckpt.parent
    cfg_file = run_dir / "config.json"
    run = json.loads(cfg_file.read_text()) if cfg_file.exists() else RunConfig().to_dict()
    model, trainer = load_checkpoint(ckpt)
    tasks = make_tasks(run["data_seed"], run["budgets"])
    k = _task_index(args.task, [t.name for t in tasks])
    n = args.batches or run["eval_batches"]
    batches = fixed_batches(tasks[k], run["data_seed"], k, 1, n, run["batch_size"], run["seq_len"])
    before = state_digest(model, trainer)
    ppl, acc = evaluate(model, batches)
    if state_digest(model, trainer) != before:
        print("model state changed during evaluation", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(dict(task=tasks[k].name, step=trainer.step, ppl=ppl, logppl=math.log(ppl), acc=acc)))
    if not args.no_append and (run_dir / "metrics.csv").exists():
        log = MetricsLog()
        log.add(trainer.step, k, "eval_ppl", ppl)
        log.add(trainer.step, k, "eval_acc", acc)
        with open(run_dir / "metrics.csv", "a") as fh:
            fh.write(log.to_csv().split("\n", 1)[1])
        with open(run_dir / "metrics.jsonl", "a") as fh:
            fh.write(log.to_jsonl())
    return EXIT_OK


def cmd_export(args, argv) -> int:
    out = export_run(args.run_dir, args.out)
    for f in sorted(out.iterdir()):
        print(f)
    return EXIT_OK


def _budgets(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"budgets must be comma-separated integers, got {text!r}")
    return vals


def _seed_list(text: str) -> list[int]:
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cortexnet", description="Continual-learning language model toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the three-task schedule")
    t.add_argument("--config", help="JSON or key=value file; CLI flags override it")
    t.add_argument("--seed", type=int, help="model initialization seed")
    t.add_argument("--data-seed", type=int)
    t.add_argument("--budgets", type=_budgets, help="steps per task, e.g. 600,600,120")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seq-len", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-batches", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--out", help="run directory (default: $CORTEXNET_OUT/seed<seed>)")
    t.add_argument("--disable-thalamus", action="store_true")
    t.add_argument("--disable-hippocampus", action="store_true")
    t.add_argument("--disable-replay", action="store_true")
    t.add_argument("--no-controller", action="store_true", help="keep replay knobs at their baseline values")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    t.add_argument("--quiet", action="store_true")

    v = sub.add_parser("verify", help="run the causality and state-semantics battery")
    v.add_argument("--config", help="overrides applied to the reference config")
    v.add_argument("--seeds", type=_seed_list, default=[0], help="e.g. 0-9 or 0,3,5")
    v.add_argument("--random-configs", type=int, default=0, help="also run this many random architectures")
    v.add_argument("--batch", type=int, default=2)
    v.add_argument("--seq-len", type=int, default=16)
    v.add_argument("--inject-bug", choices=["broken_mask", "noncausal_mean"],
                   help="negative control: plant a known causality bug")
    v.add_argument("--json", help="write the JSON report here")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one task's validation batches")
    e.add_argument("checkpoint")
    e.add_argument("--task", required=True, help="task name or index")
    e.add_argument("--batches", type=int)
    e.add_argument("--no-append", action="store_true", help="do not append to the run's metrics files")

    x = sub.add_parser("export", help="write per-series CSVs and PNG figures for a run")
    x.add_argument("run_dir")
    x.add_argument("--out", help="destination directory (default: <run_dir>/export)")
    return p


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError, InputError, FileNotFoundError) as exc:
        print(f"cortexnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"cortexnet {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
