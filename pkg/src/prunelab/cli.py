"""``prunelab`` command line.

Exit codes: 0 success, 2 configuration/usage error, 3 some grid cells failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoints import describe
from .config import ConfigError, RunConfig, load_config
from .sparse import bench, write_bench_csv

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    """Comma-separated sparsities; values above 1 are read as percentages."""
    vals = [float(v) for v in text.split(",") if v.strip()]
    return [v / 100 if v > 1 else v for v in vals]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (default: the packaged default config)")
    common.add_argument("--seed", type=int, help="override the config's seed")
    common.add_argument("--jobs", type=int, default=1, help="grid cells run in parallel (default 1)")
    common.add_argument("--out", help="output root (default: the config's `out`)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prunelab", description="Magnitude-pruning experiments on a small CTC model.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-dense", parents=[common], help="train the dense model and store snapshots")

    c = sub.add_parser("compare-methods", parents=[common], help="sparsity x method WER table")
    c.add_argument("--sparsities", type=_floats, help="e.g. 0,10,50,90 or 0.5,0.8")
    c.add_argument("--methods", type=_strs, help="subset of naive,finetune,parp,lth,lrr,iter-lth,iter-lrr")

    r = sub.add_parser("ablate-rewind", parents=[common], help="WER versus rewind epoch")
    r.add_argument("--sparsities", type=_floats)
    r.add_argument("--epochs", type=_ints, help="rewind epochs (mapped to the nearest stored snapshot)")

    n = sub.add_parser("eval-noise", parents=[common], help="WER under corrupted test inputs")
    n.add_argument("--models", type=_strs, help="model ids: dense or names listed by `inspect` (default dense)")
    n.add_argument("--kinds", type=_strs)
    n.add_argument("--levels", type=_ints)

    b = sub.add_parser("bench-sparse", parents=[common], help="dense vs CSR mat-vec timings")
    b.add_argument("--sizes", type=_ints, default=[256, 1024, 2048])
    b.add_argument("--bench-sparsities", type=_floats, default=[0.0, 0.5, 0.8, 0.9, 0.95])
    b.add_argument("--repetitions", type=int, default=20)

    i = sub.add_parser("inspect", parents=[common], help="summarize a run or a checkpoint file")
    i.add_argument("checkpoint", nargs="?", help="a .ckpt file; without it the configured run is summarized")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def _report_errors(errors) -> int:
    for e in errors:
        print(f"cell failed: {e}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "train-dense":
            rid = ex.train_dense(cfg)
            print(rid)
            return EXIT_OK
        if args.command == "compare-methods":
            rd, table, errors = ex.compare_methods(cfg, sparsities=args.sparsities, methods=args.methods, jobs=args.jobs)
            print(table, end="")
            print(f"report: {rd.report}")
            return _report_errors(errors)
        if args.command == "ablate-rewind":
            rd, epochs, errors = ex.ablate_rewind(cfg, sparsities=args.sparsities, epochs=args.epochs, jobs=args.jobs)
            print((rd.path / "rewind.csv").read_text(), end="")
            return _report_errors(errors)
        if args.command == "eval-noise":
            rd, _ = ex.eval_noise(cfg, model_ids=args.models, kinds=args.kinds, levels=args.levels)
            print(rd.path / "noise.csv")
            return EXIT_OK
        if args.command == "bench-sparse":
            reports = bench(args.sizes, args.bench_sparsities, args.repetitions, seed=cfg.seed)
            path = Path(cfg.out) / "bench.csv"
            write_bench_csv(path, reports)
            print(path.read_text(), end="")
            return EXIT_OK
        if args.command == "inspect":
            if args.checkpoint:
                for row in describe(args.checkpoint):
                    print(json.dumps(row))
            else:
                print(json.dumps(ex.summary(ex.RunDir(cfg)), indent=1))
            return EXIT_OK
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:  # bad method / kind / sparsity arguments
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
