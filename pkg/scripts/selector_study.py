#!/usr/bin/env python3
"""Run one Monte Carlo selector study and print the efficacy quantile table.

Example:
    python scripts/selector_study.py --kind real --replicates 100 --workers 2
"""

import argparse
import os

from mixsmooth.sim import SimDesign, run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", choices=["real", "latent", "mixture"],
                    default="real")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--replicates", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    design = SimDesign(kind=args.kind, n=args.n, replicates=args.replicates,
                       seed=args.seed)
    result = run_study(design, workers=args.workers)
    agg = result.aggregate

    print(f"{args.kind} design, n={args.n}, {args.replicates} replicates, "
          f"loss {agg['loss']}")
    print(f"oracle median loss: {agg['oracle_loss_median']:.5f}")
    print(f"{'selector':10s} {'q10':>7s} {'q25':>7s} {'q50':>7s} {'q75':>7s} "
          f"{'q90':>7s} {'med sigma2':>11s}")
    for name in sorted(agg["selectors"]):
        s = agg["selectors"][name]
        e = s["efficacy"]
        print(f"{name:10s} {e['q10']:7.3f} {e['q25']:7.3f} {e['q50']:7.3f} "
              f"{e['q75']:7.3f} {e['q90']:7.3f} {s['sigma_hat_median']:11.4f}")
    if result.failures:
        print(f"({len(result.failures)} replicates failed)")


if __name__ == "__main__":
    main()
