"""Convergence-rate sweeps: D at fixed (L, M), M at fixed D, the P family, and the output rate.

    python3 scripts/rates.py d-rate --seeds 0-9 --out runs/d_rate
"""
import argparse
import time
from pathlib import Path

import numpy as np

from resnet_limits.bench import (
    SweepConfig,
    emit_errors_csv,
    emit_fits_csv,
    fit_rate,
    loglog_slope,
    regime_filter,
    run_sweep,
    seed_average,
)
from resnet_limits.resnet import HPConfig, ShapeConfig

EXPERIMENTS = {
    # (shapes, hp, axis, error, regime term)
    "d-rate": ([ShapeConfig(64, 512, D) for D in (8, 16, 32, 64, 128)],
               HPConfig(eta_u=0.05, eta_v=0.05, sigma_u=0.5, sigma_v=0.5, dist="uniform"), "D", "delta_h", "t2"),
    "m-rate": ([ShapeConfig(64, M, 32) for M in (8, 16, 32, 64, 128, 256)],
               HPConfig(eta_u=0.002, eta_v=0.002), "M", "delta_h", "t1"),
    "p-family": ([ShapeConfig(64, D * D // 2, D) for D in (16, 24, 32, 48, 64)],
                 HPConfig(eta_u=0.002, eta_v=0.002), "P", "delta_h", None),
    "y-rate": ([ShapeConfig(8, M, 256) for M in (8, 16, 32, 64, 128, 256)],
               HPConfig(eta_u=0.2, eta_v=0.2, sigma_in=0.3, sigma_out=0.3), "M", "delta_y", None),
}


def parse_seeds(text):
    if "-" in text:
        lo, hi = map(int, text.split("-"))
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("experiment", choices=sorted(EXPERIMENTS))
    ap.add_argument("--seeds", default="0-9")
    ap.add_argument("--K", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    shapes, hp, axis, error, term = EXPERIMENTS[args.experiment]
    cfg = SweepConfig(shapes, parse_seeds(args.seeds), args.K, hp=hp)
    t = time.perf_counter()
    res = run_sweep(cfg, threads=args.threads)
    print(f"{len(res.records)} records, {len(res.failures)} failures, {time.perf_counter() - t:.1f}s")

    model = "h_rate" if error == "delta_h" else "y_rate"
    fit = fit_rate(res.records, model, k=args.K)
    print(f"{model}: alpha={fit.alpha:.4g} beta={fit.beta:.4g} r2={fit.r2:.3f}")
    print(f"{'L':>4} {'M':>5} {'D':>4} {'P':>10} {error:>12} {'t1 share':>9}")
    for p in seed_average(res.records, args.K):
        share = fit.shares(p.L, p.M, p.D)[0]
        print(f"{p.L:4d} {p.M:5d} {p.D:4d} {p.P:10d} {getattr(p, error):12.5g} {share:9.2f}")
    s = loglog_slope(res.records, axis, k=args.K, error=error)
    print(f"slope vs {axis} (all points): {s.slope:.3f} +- {s.stderr:.3f}")
    if term:
        try:
            s = loglog_slope(res.records, axis, k=args.K, error=error, filter=regime_filter(fit, term))
            print(f"slope vs {axis} ({term}-dominated): {s.slope:.3f} +- {s.stderr:.3f} ({s.n_points} shapes)")
        except ValueError as exc:
            print(f"regime-filtered slope unavailable: {exc}")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        emit_errors_csv(res.records, args.out / "errors.csv")
        emit_fits_csv([fit], args.out / "fits.csv")
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
