"""Command line entry point: ``modwise {gen,train,attack,bench,report}``.

Exit codes: 0 success, 2 configuration error, 3 clean gate or trend
ordering failure, 4 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attack import MODES
from .harness import (FORMATS, MODE_ORDER, ConfigError, emit_report, generate, load_config, load_manifest,
                      prepare_stack, render_markdown, run_experiment, trend_check)
from .scenario import DatasetError
from .stack import PipelineError
from .training import GateError

EXIT_OK, EXIT_CONFIG, EXIT_GATE, EXIT_ABORT = 0, 2, 3, 4

log = logging.getLogger("modwise")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config; flags override its values")
    common.add_argument("--out", help="output path (directory for gen/attack/bench/report, file for train)")
    common.add_argument("--seed", type=int,
                        help="gen: dataset seed; train: initialisation seed; attack/bench: noise seed")
    common.add_argument("--jobs", type=int, help="worker processes for scenario-level parallelism")
    common.add_argument("--dataset", help="evaluation dataset file")
    common.add_argument("--weights", help="trained stack weights file")
    common.add_argument("-v", "--verbose", action="store_true")

    attack = argparse.ArgumentParser(add_help=False)
    attack.add_argument("--eps", help="image budget in normalised units, e.g. 8/255")
    attack.add_argument("--iters", type=int, help="attack iterations k")
    attack.add_argument("--formats", help=f"comma-separated subset of {','.join(FORMATS)}")

    p = argparse.ArgumentParser(prog="modwise", description="Module-wise adversarial attacks on a toy driving stack.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate training and evaluation datasets")
    sub.add_parser("train", parents=[common], help="fit the stack and check the clean gate")
    a = sub.add_parser("attack", parents=[common, attack], help="run one attack mode over the evaluation set")
    a.add_argument("--mode", required=True, choices=MODES)
    sub.add_parser("bench", parents=[common, attack], help="run all four modes and check the trend ordering")
    r = sub.add_parser("report", parents=[common], help="re-render reports and figures from a run directory")
    r.add_argument("--formats", help=f"comma-separated subset of {','.join(FORMATS)}")
    return p


def _overrides(args) -> dict:
    ov = {"jobs": args.jobs, "eval_dataset": args.dataset, "weights": args.weights}
    if getattr(args, "formats", None):
        ov["formats"] = [f.strip() for f in args.formats.split(",") if f.strip()]
    if args.command in ("attack", "bench"):
        ov.update(eps=args.eps, iters=args.iters, seed=args.seed, out=args.out)
    if args.command == "attack":
        ov["modes"] = [args.mode]
    if args.command == "bench":
        ov["modes"] = list(MODE_ORDER)
    if args.command == "gen":
        ov["data_seed"] = args.seed
    if args.command == "train" and args.out:
        ov["weights"] = args.out
    return ov


def _cmd_gen(args, config) -> int:
    if args.out:
        out = Path(args.out)
        config = replace(config, train_dataset=out / "train.jsonl", dataset=out / "eval.jsonl")
    train, ev = generate(config)
    print(f"wrote {train} ({config.train_count} scenarios) and {ev} ({config.eval_count} scenarios)")
    return EXIT_OK


def _cmd_train(args, config) -> int:
    if args.seed is not None:
        config = replace(config, train_seed=args.seed)
    try:
        res = prepare_stack(config)
    except GateError as exc:
        print(f"gate failed: {exc}; weights written to {config.weights}", file=sys.stderr)
        return EXIT_GATE
    print(f"trained {res.steps} steps, clean gate passed; weights written to {config.weights}")
    return EXIT_OK


def _run(config, check_trend: bool) -> int:
    manifest = run_experiment(config, progress=None)
    print(render_markdown(manifest), end="")
    print(f"outputs in {config.out_dir}")
    failed = [m for m, r in manifest.modes.items() if r.status != "ok"]
    if failed:
        for m in failed:
            print(f"mode {m} failed: {manifest.modes[m].failure}", file=sys.stderr)
        return EXIT_ABORT
    if check_trend:
        tc = trend_check(manifest)
        for group, g in tc.groups.items():
            vals = ", ".join("%.4g" % v for v in g["values"])
            print(f"{'PASS' if g['ordered'] else 'FAIL'} trend {group} ({g['column']}): {vals}")
        print(f"trend check {'passed' if tc.passed else 'FAILED'}: {tc.message}")
        if not tc.passed:
            return EXIT_GATE
    return EXIT_OK


def _cmd_report(args, config) -> int:
    run_dir = Path(args.out) if args.out else Path(config.out_dir)
    manifest = load_manifest(run_dir)
    formats = [f.strip() for f in args.formats.split(",")] if args.formats else list(config.formats)
    paths = emit_report(manifest, formats, run_dir)
    from .plots import render_figures
    paths += render_figures(manifest, run_dir / "figures")
    for p in paths:
        print(p)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, _overrides(args))
        if args.command == "gen":
            return _cmd_gen(args, config)
        if args.command == "train":
            return _cmd_train(args, config)
        if args.command == "report":
            return _cmd_report(args, config)
        return _run(config, check_trend=args.command == "bench")
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
