"""Command line: ``agriscape {generate,ei,ec,bo,report}``.

Exit codes: 0 success, 1 partial failure or missing stage inputs, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config
from .landscape import InvalidInputError
from .pipeline import (DependencyError, OutputExistsError, StageError, run_bo_stage, run_ec, run_ei,
                       run_generate, run_report)
from .params import ParameterError

log = logging.getLogger("agriscape")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="pipeline JSON config (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="master seed; overrides the config value")
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for per-configuration work")
    p.add_argument("--force", action="store_true", help="replace existing stage outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="agriscape", description="Synthetic agricultural landscapes: farm-level "
                     "intervention optimisation, landscape connectivity and policy search.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="generate synthetic landscapes")
    g.add_argument("--n-configs", type=int, help="override generator.n_configs")

    e = sub.add_parser("ei", parents=[common], help="solve the farm-level model per landscape")
    e.add_argument("--in", dest="landscapes", type=Path, help="landscape directory (default: OUT/landscapes)")

    c = sub.add_parser("ec", parents=[common], help="reposition and/or optimise connectivity")
    c.add_argument("--mode", choices=("reposition", "optimize", "both"), default="both")
    c.add_argument("--in", dest="landscapes", type=Path)
    c.add_argument("--ei-dir", type=Path, help="EI results (default: OUT/ei)")

    b = sub.add_parser("bo", parents=[common], help="Bayesian search over policy instruments")
    b.add_argument("--in", dest="landscapes", type=Path)
    b.add_argument("--ec-dir", type=Path, help="stage-2 targets (default: OUT/ec/optimize)")
    b.add_argument("--n-calls", type=int, help="override bo.n_calls")
    b.add_argument("--n-init", type=int, help="override bo.n_init")
    b.add_argument("--n-samples", type=int, help="override bo.n_samples")

    r = sub.add_parser("report", parents=[common], help="aggregate tidy CSVs from run directories")
    r.add_argument("runs", nargs="*", type=Path, help="run directories to aggregate (default: OUT)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.verb == "generate" and args.n_configs is not None:
            cfg = replace(cfg, generator=replace(cfg.generator, n_configs=args.n_configs))
        if args.verb == "bo":
            over = {k: v for k, v in (("n_calls", args.n_calls), ("n_init", args.n_init),
                                      ("n_samples", args.n_samples)) if v is not None}
            if over:
                cfg = replace(cfg, bo=replace(cfg.bo, **over))
    except (ConfigError, ParameterError, InvalidInputError, ValueError) as exc:
        print(f"agriscape: invalid configuration: {exc}", file=sys.stderr)
        return 2

    try:
        if args.verb == "generate":
            rep = run_generate(cfg, args.out, args.force, args.workers)
        elif args.verb == "ei":
            rep = run_ei(cfg, args.out, args.landscapes, args.force, args.workers)
        elif args.verb == "ec":
            rep = run_ec(cfg, args.out, args.mode, args.landscapes, args.ei_dir, args.force, args.workers)
        elif args.verb == "bo":
            rep = run_bo_stage(cfg, args.out, args.landscapes, args.ec_dir, args.force, args.workers)
        else:
            rep = run_report(cfg, args.out, args.runs or [args.out], args.force)
    except OutputExistsError as exc:
        print(f"agriscape: {exc}", file=sys.stderr)
        return 2
    except (DependencyError, StageError) as exc:
        print(f"agriscape: {exc}", file=sys.stderr)
        return 1
    for failure in rep.failures:
        print(f"agriscape: {rep.stage}: {failure}", file=sys.stderr)
    log.info("%s: wrote %d files, %d failures", rep.stage, len(rep.outputs), len(rep.failures))
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
