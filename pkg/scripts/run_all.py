#!/usr/bin/env python3
"""Run every experiment with its default configuration and print a summary table.

Usage: python3 scripts/run_all.py [OUT_DIR] [--threads N] [--only NAME ...]
Each experiment writes its CSV files and manifest.txt under OUT_DIR/<name>.
"""
import argparse
import os
import sys

from stoclaw.harness import EXPERIMENTS, ExperimentConfig, resolve, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", nargs="?", default="results")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--only", nargs="+", choices=EXPERIMENTS, default=None)
    args = parser.parse_args()

    names = args.only or [n for n in EXPERIMENTS if n != "simulate"]
    failed = []
    for name in names:
        cfg = resolve(ExperimentConfig().with_(experiment={"name": name, "threads": args.threads}))
        man = run_experiment(cfg, out_dir=os.path.join(args.out_dir, name))
        print(f"{name:18s} {'PASS' if man.passed else 'FAIL'}  {man.wall_clock:7.1f} s")
        for check in man.checks:
            print("    " + check.line())
        if not man.passed:
            failed.append(name)
    print(f"\n{len(names) - len(failed)}/{len(names)} experiments passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
