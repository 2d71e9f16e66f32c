"""Efficiency of the four equally weighted starting designs under each profile.

    python scripts/reproduce_table3.py [--out DIR]
"""

import argparse

from adaptix.config import RunConfig
from adaptix.harness import PROFILE_ORDER, table3

REFERENCE = {
    "A": (0.91, 0.61, 0.62, 0.73),
    "B": (0.89, 0.92, 0.79, 0.58),
    "C": (0.22, 0.03, 0.19, 0.12),
    "D": (0.81, 0.76, 0.63, 0.86),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    rows = table3(RunConfig(out=args.out))
    print("design " + " ".join(f"{p.value:>10}" for p in PROFILE_ORDER))
    worst = 0.0
    for d, *vals in rows:
        print(f"{d:>6} " + " ".join(f"{v:10.3f}" for v in vals))
        worst = max(worst, *(abs(v - r) for v, r in zip(vals, REFERENCE[d])))
    print(f"max deviation from reference values: {worst:.4f}")


if __name__ == "__main__":
    main()
