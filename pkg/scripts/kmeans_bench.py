"""k-means compression versus the full posterior on the design-B sigmoid Emax scenario.

Writes kmeans_bench.csv (one row per replicate) and kmeans_bench_summary.csv.

    python scripts/kmeans_bench.py --reps 200 --sizes 15,60,150 --jobs 4
"""

import argparse

from adaptix.config import parse_config
from adaptix.harness import kmeans_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--sizes", default="15,60,150")
    ap.add_argument("--seed", default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/kmeans")
    args = ap.parse_args()
    cfg = parse_config(None, {
        "replications": args.reps, "kmeans_bench_sizes": args.sizes, "seed": args.seed,
        "jobs": args.jobs, "out": args.out,
    })
    for n1, reps, eff, ratio, diff, speed in kmeans_bench(cfg):
        print(f"n1={n1:4d} reps={reps} efficiency={eff:.4f} ratio={ratio:.4f} difference={diff:.4f} speedup={speed:.1f}x")


if __name__ == "__main__":
    main()
