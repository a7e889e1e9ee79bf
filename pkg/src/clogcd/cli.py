"""Command-line entry point.

Verbs:
  run        execute the full pipeline and strategy sweep from a config file
  compare    consolidate finished run directories into one table
  decompose  run dataset prep + encoder + clustering, emit the manifest only
  encode     emit train-split latent vectors only

Thread caps (CLOGCD_THREADS, --deterministic) are applied to the BLAS
environment before numpy is imported, so this module must not import numpy
or any numpy-using module at load time.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def _setup_threads(deterministic: bool):
    cap = os.environ.get("CLOGCD_THREADS")
    threads = None
    if cap is not None:
        try:
            threads = max(1, int(cap))
        except ValueError:
            print(f"warning: ignoring non-integer CLOGCD_THREADS={cap!r}", file=sys.stderr)
    if deterministic:
        threads = 1 if threads is None else min(threads, 1)
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clogcd",
        description="Curriculum training with oscillating class-decomposition granularity.")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded math and byte-stable outputs")

    p_run = sub.add_parser("run", help="execute the configured strategy sweep")
    add_common(p_run)
    p_run.add_argument("--epochs-per-stage", type=int, dest="epochs_per_stage",
                       help="per-stage epoch budget (overrides config)")
    p_run.add_argument("--strategies",
                       help="comma-separated strategy list (overrides config)")
    p_run.add_argument("--parallel-strategies", action="store_true",
                       help="run strategies in separate processes")

    p_cmp = sub.add_parser("compare", help="tabulate finished runs")
    p_cmp.add_argument("run_dirs", nargs="+", help="run output directories")
    p_cmp.add_argument("--out", help="also write the comparison CSV here")

    p_dec = sub.add_parser("decompose", help="emit granularity manifest only")
    add_common(p_dec)

    p_enc = sub.add_parser("encode", help="emit latent vectors only")
    add_common(p_enc)
    p_enc.add_argument("--encoder", help="reuse a saved encoder checkpoint "
                                         "instead of retraining")
    return parser


def _load_config(args):
    from dataclasses import replace

    from clogcd.config import load_run_config

    cfg = load_run_config(args.config)
    updates = {}
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.deterministic:
        updates["deterministic"] = True
    if getattr(args, "epochs_per_stage", None) is not None:
        if args.epochs_per_stage < 0:
            from clogcd.errors import ConfigError
            raise ConfigError(["--epochs-per-stage must be >= 0"])
        updates["epochs_per_stage"] = args.epochs_per_stage
    if getattr(args, "strategies", None):
        from clogcd.config import _valid_strategy
        from clogcd.errors import ConfigError
        names = [s.strip() for s in args.strategies.split(",") if s.strip()]
        bad = [s for s in names if not _valid_strategy(s)]
        if bad or not names:
            raise ConfigError([f"--strategies: unknown strategy {s!r}" for s in bad]
                              or ["--strategies: empty list"])
        updates["strategies"] = names
    return replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _setup_threads(getattr(args, "deterministic", False))

    from clogcd.errors import ClogcdError, ConfigError

    try:
        if args.verb == "run":
            from clogcd.runner import execute_run
            cfg = _load_config(args)
            out = execute_run(cfg, parallel_strategies=args.parallel_strategies)
            print(f"run complete: {out}")
            return 0
        if args.verb == "compare":
            from clogcd.runner import compare_runs
            csv_text, table = compare_runs(args.run_dirs)
            if args.out:
                from pathlib import Path
                Path(args.out).write_text(csv_text)
            print(table, end="")
            return 0
        if args.verb == "decompose":
            from clogcd.runner import execute_decompose
            out = execute_decompose(_load_config(args))
            print(f"decomposition manifest written: {out}")
            return 0
        if args.verb == "encode":
            from clogcd.runner import execute_encode
            out = execute_encode(_load_config(args), encoder_path=args.encoder)
            print(f"latents written: {out}")
            return 0
        raise ClogcdError(f"unknown verb {args.verb!r}")
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except ClogcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
