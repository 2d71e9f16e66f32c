"""Stage-2 RelEff of ML versus Bayesian updating across interim timings.

Runs one design/profile/N column of the scenario grid and prints mean
RelEff with its 10% and 90% quantiles per stage-1 size, the data behind
an efficiency-versus-timing plot.

    python scripts/efficiency_by_timing.py --design C --profile sigemax --n 250 --reps 200
"""

import argparse
import csv
from pathlib import Path

from adaptix.config import parse_config
from adaptix.harness import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--design", default="C")
    ap.add_argument("--profile", default="sigemax")
    ap.add_argument("--n", default="250")
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/timing")
    args = ap.parse_args()
    cfg = parse_config(None, {
        "designs": args.design, "profiles": args.profile, "total_ns": args.n,
        "updatings": "ml,bayes,fixed", "replications": args.reps, "jobs": args.jobs, "out": args.out,
    })
    rc = run(cfg)
    with open(Path(args.out) / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'n1':>5} {'rule':>6} {'mean':>7} {'q10':>7} {'q90':>7} {'ratio_mae':>9}")
    for r in rows:
        if r["updating"] == "fixed":
            continue
        print(f"{r['stage1_n']:>5} {r['updating']:>6} {float(r['releff_mean']):7.3f} "
              f"{float(r['releff_q10']):7.3f} {float(r['releff_q90']):7.3f} {float(r['ratio_mae']):9.3f}")
    raise SystemExit(rc)


if __name__ == "__main__":
    main()
