"""Command-line entry point: ``adaptix`` / ``python -m adaptix``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, parse_config
from .harness import kmeans_bench, run, table3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="adaptix",
        description="Simulate two-stage adaptive dose-finding trials with ML or Bayesian interim updating.",
    )
    p.add_argument("--config", metavar="PATH", help="JSON or YAML config file (a manifest.json also works)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--trials", metavar="N", dest="replications", help="replications per cell")
    p.add_argument("--seed", metavar="U64", help="master seed (default: $ADAPTIX_SEED or built-in)")
    p.add_argument("--jobs", metavar="N", help="worker processes")
    p.add_argument("--design", dest="designs", help="A,B,C,D or all (comma list)")
    p.add_argument("--profile", dest="profiles", help="linear,quadratic,emax,sigemax or all")
    p.add_argument("--n", dest="total_ns", help="150,250 or all")
    p.add_argument("--stage1", dest="stage1_ns", help="restrict stage-1 sizes (comma list)")
    p.add_argument("--updating", dest="updatings", help="ml,bayes,fixed or all")
    p.add_argument("--record-runtime", dest="record_runtime", action="store_const", const=True,
                   help="fill the runtime_ms column (makes trials.csv non-reproducible)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--table3", action="store_true", help="starting-design efficiencies only")
    mode.add_argument("--kmeans-bench", action="store_true", help="k-means relative performance study only")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_CONFIG_FLAGS = ("out", "replications", "seed", "jobs", "designs", "profiles", "total_ns", "stage1_ns",
                 "updatings", "record_runtime")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, {k: getattr(args, k) for k in _CONFIG_FLAGS})
    except ConfigError as e:
        print(f"adaptix: config error: {e}", file=sys.stderr)
        return 2
    if args.table3:
        for row in table3(cfg):
            print(row[0], " ".join(f"{v:.3f}" for v in row[1:]))
        return 0
    if args.kmeans_bench:
        for n1, reps, eff, ratio, diff, speed in kmeans_bench(cfg):
            print(f"n1={n1} reps={reps} efficiency={eff:.4f} ratio={ratio:.4f} difference={diff:.4f} speedup={speed:.1f}")
        return 0
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
