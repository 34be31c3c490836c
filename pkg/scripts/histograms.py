"""Coordinates of the last hidden layer against the Gaussian limit law, per GD step.

    python3 scripts/histograms.py --shape 64 256 256 --out runs/hist.csv
"""
import argparse
from pathlib import Path

import numpy as np

from resnet_limits import activations
from resnet_limits.bench import emit_hist_csv, histogram_ks
from resnet_limits.linear_limit import LinearLimitConfig, linear_limit_run
from resnet_limits.numerics import rng_create
from resnet_limits.resnet import Dataset, HPConfig, ShapeConfig, train

X = np.array([1.0, 0.5, -0.3])
Y_STAR = np.array([0.5, -1.0, 0.2])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--shape", type=int, nargs=3, default=[64, 256, 256], metavar=("L", "M", "D"))
    ap.add_argument("--steps", type=int, nargs="+", default=[0, 2, 4])
    ap.add_argument("--eta", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=30)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    hp = HPConfig(eta_u=args.eta, eta_v=args.eta)
    shape = ShapeConfig(*args.shape)
    K = max(args.steps)
    lin = linear_limit_run(LinearLimitConfig(1.0, X, Y_STAR, K + 1, hp=hp))
    rec = train(shape, hp, activations.linear(1.0), Dataset(X[None], Y_STAR[None]), K,
                rng=rng_create(args.seed, "gaussianity"))
    G = lin.nodes(lin.Gamma_H)[-1]
    hists = []
    for k in args.steps:
        h = histogram_ks(rec.hidden[shape.L][k, 0], G[k, k], bins=args.bins)
        hists.append((shape.L, k, h))
        print(f"k={k}: limit variance {G[k, k]:.4f}, sample variance {np.var(rec.hidden[shape.L][k, 0]):.4f}, "
              f"KS {h.ks_stat:.4f}, p {h.p_value:.3f}")
    if args.out:
        emit_hist_csv(hists, args.out)


if __name__ == "__main__":
    main()
