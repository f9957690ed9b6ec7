"""Command-line entry point: dataset generation, experiment runs, reports.

Exit codes: 0 success, 2 configuration error, 3 invariant violation,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, InvariantError, PipelineError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sslegad",
        description="Two-stage active-learning sampler driving semi-supervised "
                    "co-training segmentation (desk-scale, CPU).")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    gen.add_argument("--n", type=int, required=True, help="number of samples")
    gen.add_argument("--out", type=Path, required=True, help="output directory")
    gen.add_argument("--seed", type=int, required=True, help="master seed")
    gen.add_argument("--size", type=int, default=64, help="image side length")

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", type=Path, required=True, help="JSON config")
    run.add_argument("--out", type=Path, required=True, help="run directory")
    run.add_argument("--strategy", choices=("random", "entropy", "egad", "supervised"),
                     help="override al.strategy from the config")
    run.add_argument("--seed", type=int, help="override seeds.master from the config")
    run.add_argument("--threads", type=int, help="override train.threads (BLAS cap)")

    rep = sub.add_parser("report", help="aggregate completed runs into a table + figures")
    rep.add_argument("--runs", type=Path, nargs="+", required=True,
                     help="one or more completed run directories")
    rep.add_argument("--out", type=Path, required=True, help="output CSV path")
    rep.add_argument("--no-figures", action="store_true",
                     help="skip figure rendering (CSV only)")
    return parser


def cmd_gen_data(args) -> int:
    from . import synthdata
    samples = synthdata.generate(args.n, seed=args.seed, size=args.size)
    synthdata.save_dataset(samples, args.out, seed=args.seed, size=args.size)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from threadpoolctl import threadpool_limits

    from . import trainer
    from .config import load_config

    cfg = load_config(args.config)
    if args.strategy is not None:
        cfg.al.strategy = args.strategy
        cfg.validate()
    if args.seed is not None:
        cfg.seeds.master = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.train.threads = args.threads
    with threadpool_limits(limits=cfg.train.threads):
        summary = trainer.run_al_experiment(cfg, args.out)
    print(f"run complete: strategy={summary['strategy']} seed={summary['seed']} "
          f"final test DSC={summary['final_test_dsc']:.2f} "
          f"HD={summary['final_test_hd']:.2f} -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import report
    results = [report.collect_run(d) for d in args.runs]
    rows = report.write_report(results, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    if not args.no_figures:
        for fig in report.render_figures(results, Path(args.out).parent):
            print(f"wrote {fig}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "report":
            return cmd_report(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
