"""Sweep the distillation temperature for eTag and print A and F per value.

    python3 scripts/tau_sweep.py --taus 1,2,3,5 --seeds 0,1
"""

import argparse

import numpy as np

from etag.config import load_config
from etag.harness import run_cil


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--taus", default="1,2,3,5")
    ap.add_argument("--seeds", default="0,1")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    print("tau      A       F")
    for tau in (float(s) for s in args.taus.split(",")):
        res = [run_cil(load_config(args.config, args.set + [f"tau={tau}", f"seed={s}", "method=eTag"]))
               for s in seeds]
        A = np.mean([r.A for r in res])
        F = np.mean([r.F for r in res])
        print(f"{tau:<5g} {100 * A:6.2f}  {100 * F:6.2f}", flush=True)


if __name__ == "__main__":
    main()
