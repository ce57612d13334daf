"""Command-line front end.

``oclearn run`` executes the configured method x seed grid and writes the
result files; ``oclearn sweep`` repeats the grid across memory budgets and
prints the comparison table. Exit code 0 means every cell succeeded, 1
means at least one cell failed (the rest still ran), 2 means the config or
arguments were invalid.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .experiment import (
    ExperimentConfig,
    format_sweep_table,
    load_config,
    run_budget_sweep,
    run_experiment,
    write_sweep_files,
)
from .metrics import aggregate_seeds

__all__ = ["main", "build_parser"]

RESULTS_ENV = "OCLEARN_RESULTS"


def _int_list(raw: str) -> tuple[int, ...]:
    try:
        items = tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")
    if not items:
        raise argparse.ArgumentTypeError(f"expected at least one integer, got {raw!r}")
    return items


def _str_list(raw: str) -> tuple[str, ...]:
    items = tuple(x.strip() for x in raw.split(",") if x.strip())
    if not items:
        raise argparse.ArgumentTypeError(f"expected at least one name, got {raw!r}")
    return items


def _positive(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {raw!r}")
    return value


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH",
                     help="INI experiment config (defaults apply without one)")
    sub.add_argument("--methods", type=_str_list, metavar="A,B,...",
                     help="override the method cells to run")
    sub.add_argument("--seeds", type=_int_list, metavar="0,1,...",
                     help="override the run seeds")
    sub.add_argument("--out", metavar="DIR",
                     help=f"result directory (default: config, then ${RESULTS_ENV}, "
                          "then ./results)")
    sub.add_argument("--jobs", type=_positive, default=1, metavar="N",
                     help="cells to run in parallel (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oclearn",
        description="Online class-incremental learning experiments.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run the method x seed grid")
    _add_common(run)
    run.add_argument("--top-k", type=_positive, metavar="K",
                     help="override top-k accuracy rank")
    run.add_argument("--budget", type=_positive, metavar="Q",
                     help="override the per-class memory budget")

    sweep = commands.add_parser("sweep", help="compare memory budgets")
    _add_common(sweep)
    sweep.add_argument("--budgets", type=_int_list, default=(10, 20, 50),
                       metavar="Q1,Q2,...", help="per-class budgets (default 10,20,50)")
    return parser


def _configure(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.methods is not None:
        overrides["methods"] = args.methods
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if getattr(args, "top_k", None) is not None:
        overrides["top_k"] = args.top_k
    if getattr(args, "budget", None) is not None:
        overrides["memory_budget"] = args.budget
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    for name in cfg.methods:
        cfg.resolve_cell(name)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> str:
    if args.out:
        return args.out
    if cfg.output:
        return cfg.output
    return os.environ.get(RESULTS_ENV) or "results"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _configure(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args, cfg)

    if args.command == "run":
        result = run_experiment(cfg, out, jobs=args.jobs)
        if result.runs:
            print(f"{'method':<24}{'avg':>16}{'final':>16}")
            for method, agg in sorted(aggregate_seeds(list(result.runs)).items()):
                avg = f"{agg.average_mean:.3f}+-{agg.average_std:.3f}"
                fin = f"{agg.final_mean:.3f}+-{agg.final_std:.3f}"
                print(f"{method:<24}{avg:>16}{fin:>16}")
        print(f"results written to {out}")
        for cell, seed, _ in result.failures:
            print(f"FAILED: {cell} seed {seed} (see report.json)", file=sys.stderr)
        return 0 if result.ok else 1

    result = run_budget_sweep(cfg, args.budgets, jobs=args.jobs)
    write_sweep_files(result, out)
    print(format_sweep_table(result))
    print(f"sweep written to {out}")
    for budget, cell, seed, _ in result.failures:
        print(f"FAILED: {cell} seed {seed} at budget {budget}", file=sys.stderr)
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
