"""Command-line entry point: ``stoclaw <experiment> [options]``."""
from __future__ import annotations

import argparse
import os
import shutil
import sys

from .harness import ALIASES, EXPERIMENTS, ConfigError, ExperimentError, load_config, resolve, run_experiment

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stoclaw",
        description="Run a numerical experiment on a viscous stochastic conservation law.")
    parser.add_argument("experiment", choices=sorted(EXPERIMENTS + tuple(ALIASES)),
                        help="experiment to run")
    parser.add_argument("--config", metavar="FILE", help="sectioned key = value configuration file")
    parser.add_argument("--seed", type=_u64, help="master seed (unsigned 64-bit)")
    parser.add_argument("--replicas", type=_positive_int, help="Monte Carlo sample count")
    parser.add_argument("--threads", type=_positive_int, help="worker threads (results do not depend on it)")
    parser.add_argument("--out-dir", metavar="DIR", help="directory for CSV files and manifest.txt")
    sym = parser.add_argument_group("symbol scan")
    sym.add_argument("--delta-min", type=_positive_float)
    sym.add_argument("--delta-max", type=_positive_float)
    sym.add_argument("--points", type=_positive_int)
    sym.add_argument("--out", metavar="CSV", help="extra copy of symbol.csv at this path")
    parser.add_argument("--quiet", action="store_true", help="print only the verdict line")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, resolved=False)
    except (OSError, ConfigError) as exc:
        print(f"stoclaw: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    overrides = {"name": ALIASES.get(args.experiment, args.experiment)}
    for key in ("seed", "replicas", "threads", "out_dir", "delta_min", "delta_max", "points"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    cfg = cfg.with_(experiment=overrides)
    if cfg.experiment.delta_min >= cfg.experiment.delta_max:
        print("stoclaw: --delta-min must be below --delta-max", file=sys.stderr)
        return EXIT_USAGE
    cfg = resolve(cfg)
    try:
        manifest = run_experiment(cfg)
    except ExperimentError as exc:
        print(f"stoclaw: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.out and cfg.name == "symbol_scan":
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        shutil.copyfile(os.path.join(cfg.experiment.out_dir, "symbol.csv"), args.out)
    if not args.quiet:
        for check in manifest.checks:
            print(check.line())
    verdict = "PASS" if manifest.passed else "FAIL"
    print(f"{cfg.name}: {verdict} ({manifest.wall_clock:.1f} s, output in {cfg.experiment.out_dir})")
    return EXIT_OK if manifest.passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
