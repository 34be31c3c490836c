"""Gap between a normalized sum of centered exponentials and its Gaussian limit, per test function.

    python3 scripts/clt_decay.py --n-mc 1000000 --out runs/clt.csv
"""
import argparse
from pathlib import Path

from resnet_limits.bench import CLT_FUNCTIONS, CltProbe, clt_empirical_gap, emit_clt_csv, powerlaw_slope
from resnet_limits.numerics import rng_create


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, nargs="+", default=[100, 1000, 10_000, 100_000])
    ap.add_argument("--n-mc", type=int, default=10**6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    rows = []
    for f_id in CLT_FUNCTIONS:
        gaps = clt_empirical_gap(CltProbe(args.n, f_id=f_id, n_mc=args.n_mc), rng_create(args.seed, f"clt.{f_id}"),
                                 threads=args.threads)
        rows += gaps
        cells = "  ".join(f"n={g.n}: {g.gap:.3e} (se {g.stderr:.1e})" for g in gaps)
        try:
            slope = f"slope {powerlaw_slope(args.n, [g.gap for g in gaps]).slope:.3f}"
        except ValueError:
            slope = "slope n/a"
        print(f"{f_id:12s} {slope}  {cells}")
    if args.out:
        emit_clt_csv(rows, args.out)


if __name__ == "__main__":
    main()
