"""Compare methods over several seeds and print mean +- std of A and F.

    python3 scripts/run_ordering.py --methods Fine,eTag,Joint --seeds 0,1,2
    python3 scripts/run_ordering.py --config configs/desk.yaml --methods eTag,B0,B1,B2,B3 --out ablation.csv
"""

import argparse
import csv
import time

import numpy as np

from etag.config import load_config
from etag.harness import run_cil


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--methods", default="Fine,eTag,Joint")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", help="optional CSV of per-run results")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for method in args.methods.split(","):
        A, F = [], []
        start = time.perf_counter()
        for seed in seeds:
            cfg = load_config(args.config, args.set + [f"method={method}", f"seed={seed}"])
            r = run_cil(cfg)
            A.append(r.A)
            F.append(r.F if r.F is not None else np.nan)
            rows.append({"method": method, "seed": seed, "A": r.A, "F": r.F})
        A, F = np.array(A), np.array(F)
        print(f"{method:6s} A {100 * A.mean():6.2f} +- {100 * A.std(ddof=1):5.2f}   "
              f"F {100 * F.mean():6.2f} +- {100 * F.std(ddof=1):5.2f}   "
              f"({time.perf_counter() - start:.0f}s)", flush=True)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["method", "seed", "A", "F"])
            wr.writeheader()
            wr.writerows(rows)


if __name__ == "__main__":
    main()
