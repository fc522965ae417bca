"""Command-line entry point.

    inflora run   --config FILE --out DIR [--seeds 1,2,3]
    inflora check [--inject-fault skip-projection]
    inflora sweep --config FILE --param r --values 1,4,16 [--out DIR] [--seeds ...]
    inflora ckpt  save PATH [--config FILE] [--seed N] [--variant NAME]
    inflora ckpt  load PATH

Exit codes: 0 success, 1 property or run failure, 2 configuration error,
3 I/O error (including unreadable checkpoints). The log level comes from
``INFLORA_LOG_LEVEL`` (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .checks import FAULTS, check_suite
from .continual import DesignVariant, Learner, train_task
from .data import gen_task_sequence
from .errors import ConfigError, FormatError, InfLoraError, IoError, ParseError
from .experiment import ExperimentConfig, load_config, pretrained_backbone, run_experiment, sweep
from .metrics import collect_stats, empty_stats, evaluate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("inflora")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(path):
    return load_config(path) if path else ExperimentConfig()


def _print_summary(report):
    print(f"{'variant':<16}{'seed':>6}{'ACC_T':>10}{'avg ACC':>10}")
    for r in report.results:
        acc_t, avg = r.summary()
        if r.failed:
            print(f"{r.variant:<16}{r.seed:>6}    failed: {r.failed}")
        else:
            print(f"{r.variant:<16}{r.seed:>6}{acc_t:>10.4f}{avg:>10.4f}")


def cmd_run(args):
    cfg = _config(args.config)
    out = args.out or cfg.output_dir
    report = run_experiment(cfg, out_dir=out, seeds=args.seeds)
    _print_summary(report)
    print(f"results written to {out}")
    return EXIT_FAIL if report.failed else EXIT_OK


def cmd_check(args):
    results = check_suite(fault=args.inject_fault)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_sweep(args):
    cfg = _config(args.config)
    values = args.values
    rows = sweep(cfg, args.param, values, out_dir=args.out, seeds=args.seeds)
    print(f"{'value':>8}  {'variant':<16}{'ACC_T':>10}{'avg ACC':>10}")
    for value, variant, acc_t, avg in rows:
        print(f"{value:>8g}  {variant:<16}{acc_t:>10.4f}{avg:>10.4f}")
    return EXIT_OK


def train_state(cfg, seed, variant):
    """Run one variant over the whole sequence; returns (net, memories, stats, last accuracy row)."""
    seq = gen_task_sequence(replace(cfg.data, seed=seed))
    net = pretrained_backbone(cfg, seq, seed)
    learner = Learner(net=net, cfg=replace(cfg.train, variant=DesignVariant(variant), seed=seed), n_tasks=len(seq))
    stats = empty_stats()
    for t, task in enumerate(seq.tasks, start=1):
        train_task(learner, task, t)
        stats = stats.merge(collect_stats(net, task.train_x, task.train_y))
    return net, learner.memories, stats, evaluate(net, seq, len(seq) - 1)


def cmd_ckpt(args):
    if args.action == "save":
        cfg = _config(args.config)
        net, memories, stats, row = train_state(cfg, args.seed, args.variant)
        size = save_checkpoint(args.path, net, memories, stats)
        print(f"saved {args.path} ({size} bytes); final accuracies {np.round(row, 4).tolist()}")
        return EXIT_OK
    net, memories, stats = load_checkpoint(args.path)
    d_in, hidden, n_classes = net.dims
    print(f"network: {d_in} -> {hidden} -> {n_classes}, adapted layers {net.adapted_indices()}")
    for i, mem in sorted(memories.items()):
        print(f"memory layer {i}: mode {mem.mode.value}, ambient {mem.dim_ambient}, grad dim {mem.dim_grad}")
    print(f"class statistics: {len(stats.classes)} classes")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="inflora", description="Continual learning with low-rank branches kept clear of old-task inputs")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every configured variant and write result files")
    run.add_argument("--config", help="YAML experiment config (defaults if omitted)")
    run.add_argument("--out", help="output directory (config output_dir if omitted)")
    run.add_argument("--seeds", type=_int_list, help="comma-separated seeds overriding the config")
    run.set_defaults(func=cmd_run)

    chk = sub.add_parser("check", help="run the invariant suite")
    chk.add_argument("--inject-fault", choices=FAULTS, default=None, help="deliberately break one component")
    chk.set_defaults(func=cmd_check)

    sw = sub.add_parser("sweep", help="re-run the experiment over values of r or eps")
    sw.add_argument("--config")
    sw.add_argument("--param", required=True, help="r or eps")
    sw.add_argument("--values", required=True, type=_float_list)
    sw.add_argument("--out")
    sw.add_argument("--seeds", type=_int_list)
    sw.set_defaults(func=cmd_sweep)

    ck = sub.add_parser("ckpt", help="save or inspect a checkpoint")
    ck.add_argument("action", choices=("save", "load"))
    ck.add_argument("path")
    ck.add_argument("--config")
    ck.add_argument("--seed", type=int, default=1)
    ck.add_argument("--variant", default=DesignVariant.INFLORA.value, choices=[v.value for v in DesignVariant])
    ck.set_defaults(func=cmd_ckpt)
    return p


def _setup_logging():
    name = os.environ.get("INFLORA_LOG_LEVEL", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoError, FormatError, ParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InfLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
