"""Nonlinear solver against the exact linear limit: replicas of the particle solver at linear activation.

    python3 scripts/dmft_validation.py --replicas 10 --a 0.7
"""
import argparse
import time

import numpy as np

from resnet_limits import activations
from resnet_limits.dmft import DmftConfig, dmft_run, empirical_covariances
from resnet_limits.linear_limit import LinearLimitConfig, limit_outputs, linear_limit_run
from resnet_limits.numerics import SGrid, rng_create
from resnet_limits.resnet import HPConfig

X = np.array([1.0, 0.5, -0.3])
Y_STAR = np.array([0.5, -1.0, 0.2])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--replicas", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--a", type=float, default=0.7)
    ap.add_argument("--eta", type=float, default=0.3)
    ap.add_argument("--K", type=int, default=4)
    ap.add_argument("--P", type=int, default=2000)
    ap.add_argument("--n-mc", type=int, default=2000)
    ap.add_argument("--n-steps", type=int, default=100)
    args = ap.parse_args()

    hp = HPConfig(eta_u=args.eta, eta_v=args.eta)
    grid = SGrid(args.n_steps)
    lin = linear_limit_run(LinearLimitConfig(args.a, X, Y_STAR, args.K, hp=hp, grid=grid))
    exact = {"Gamma_H": np.diagonal(lin.nodes(lin.Gamma_H), axis1=1, axis2=2),
             "Gamma_B": np.diagonal(lin.nodes(lin.Gamma_B), axis1=1, axis2=2),
             "y": limit_outputs(lin)}
    got = {k: [] for k in exact}
    t = time.perf_counter()
    for seed in range(args.first_seed, args.first_seed + args.replicas):
        cfg = DmftConfig(X, Y_STAR, args.K, activations.linear(args.a), hp=hp, grid=grid, P=args.P, n_mc=args.n_mc)
        ens, y = dmft_run(cfg, rng_create(seed, "dmft"))
        cov = empirical_covariances(ens, args.K - 1)
        got["Gamma_H"].append(np.diagonal(cov.Gamma_H[::2], axis1=1, axis2=2))
        got["Gamma_B"].append(np.diagonal(cov.Gamma_B[::2], axis1=1, axis2=2))
        got["y"].append(y)
        iters = max(r.iterations for r in ens.reports) if ens.reports else 0
        print(f"seed {seed}: {time.perf_counter() - t:.1f}s, max Picard iterations {iters}", flush=True)
    for name, ref in exact.items():
        A = np.array(got[name])
        se = A.std(axis=0, ddof=1) / np.sqrt(len(A))
        z = np.abs(A.mean(axis=0) - ref) / np.where(se > 0, se, np.inf)
        print(f"{name}: max z {z.max():.2f}, share of z > 2: {np.mean(z > 2):.3f}")


if __name__ == "__main__":
    main()
