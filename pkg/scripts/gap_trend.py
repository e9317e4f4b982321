#!/usr/bin/env python3
"""Track how fast the tuning scores converge to the loss as n grows.

For each sample size the table reports the replicate median of
|score - loss - mean(eps^2)| / loss at the V-selected fit; the ratio should
shrink as n grows.

Example:
    python scripts/gap_trend.py --kind real --n-list 100,400,1600
"""

import argparse
import os

from mixsmooth.sim import asymptotic_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", choices=["real", "latent", "mixture"],
                    default="real")
    ap.add_argument("--n-list", default="100,400,1600")
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    n_list = tuple(int(v) for v in args.n_list.split(","))
    rows = asymptotic_check(args.kind, n_list, args.replicates, args.seed,
                            workers=args.workers)
    print(f"{args.kind} design, {args.replicates} replicates per n, "
          f"loss {rows[0]['loss']}")
    print(f"{'n':>6s} {'U ratio':>9s} {'V ratio':>9s} {'median loss':>12s}")
    for r in rows:
        print(f"{r['n']:6d} {r['u_ratio_median']:9.4f} "
              f"{r['v_ratio_median']:9.4f} {r['loss_median']:12.6f}")


if __name__ == "__main__":
    main()
