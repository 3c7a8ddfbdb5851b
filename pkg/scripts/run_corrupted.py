"""Corrupted-mixture comparison of the iterated loop against its ablations and the BC baselines.

Usage: python scripts/run_corrupted.py [--seeds 0 1 2] [--out corrupted.csv]
"""

import argparse
import csv
import sys
import time

from idrl.experiments import CorruptedConfig, oracle_return, run_corrupted

METHODS = ("idrl", "idrl_m1", "action", "bc", "dwbc")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=list(METHODS))
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    cfg = CorruptedConfig()
    _, oracle = oracle_return(cfg.spec)
    rows = []
    for seed in args.seeds:
        t0 = time.time()
        res = run_corrupted(seed, cfg, methods=args.methods)
        rows.append({"seed": seed, **{m: res[m] for m in args.methods}})
        print(f"seed {seed}: " + " ".join(f"{m}={res[m]:.4f}" for m in args.methods)
              + f" sizes={res.get('idrl_sizes')} ({time.time() - t0:.0f}s)", flush=True)
    means = {m: sum(r[m] for r in rows) / len(rows) for m in args.methods}
    print("mean: " + " ".join(f"{m}={v:.4f}" for m, v in means.items()) + f" oracle={oracle:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["seed", *args.methods])
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
