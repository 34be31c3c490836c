"""Skeleton-map recursions: finite-D maps, mean-field maps and deterministic skeleton vectors.

Gradient matrices follow the row = derivative variable, column = component
convention: ``grad[..., j, i] = d v_i / d z_j``. Non-anticipativity makes every
such matrix upper triangular, and in the linear case ``v = grad_h.T @ z_h +
grad_b.T @ z_b``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .activations import ActivationSpec
from .errors import InvalidInputError


@dataclass
class CovSlices:
    """Gamma^H(s,s) and Gamma^B(s,s) restricted to indices 0..n-1 (optionally stacked over s)."""

    Gamma_H: np.ndarray
    Gamma_B: np.ndarray

    def __post_init__(self):
        self.Gamma_H = np.asarray(self.Gamma_H, dtype=float)
        self.Gamma_B = np.asarray(self.Gamma_B, dtype=float)

    @property
    def size(self) -> int:
        return self.Gamma_H.shape[-1]


@dataclass
class SkeletonVectors:
    vF: np.ndarray  # (..., k)
    vG: np.ndarray
    grad_h_vF: np.ndarray  # (..., k, k)
    grad_b_vF: np.ndarray
    grad_h_vG: np.ndarray
    grad_b_vG: np.ndarray
    p: np.ndarray  # (..., k): p_0 .. p_{k-1}
    q: np.ndarray

    @property
    def k(self) -> int:
        return self.vF.shape[-1]


@dataclass
class SkeletonEvalFinite:
    f: list  # f_0 .. f_k, each (D,)
    g: list


def skeleton_vectors(cov: CovSlices, z_h, z_b, k: int, act: ActivationSpec, eta_u: float, eta_v: float) -> SkeletonVectors:
    """Skeleton vectors v^F_k, v^G_k, their path gradients, and p_j, q_j for j < k.

    Broadcasts over leading axes: ``cov`` arrays are (..., n, n) with n >= k
    and the paths are (..., m) with m >= k; entries at index >= k are never
    read. Gradients come from forward differentiation through p and q.
    """
    if k < 0:
        raise InvalidInputError("k must be >= 0")
    GH, GB = cov.Gamma_H, cov.Gamma_B
    if GH.shape[-1] < k or GB.shape[-1] < k:
        raise InvalidInputError("covariance slices do not cover the requested step")
    z_h = np.asarray(z_h, dtype=float)
    z_b = np.asarray(z_b, dtype=float)
    batch = np.broadcast_shapes(z_h.shape[:-1], z_b.shape[:-1], GH.shape[:-2], GB.shape[:-2])
    vF = np.zeros(batch + (k,))
    vG = np.zeros(batch + (k,))
    p = np.zeros(batch + (k,))
    q = np.zeros(batch + (k,))
    Fh = np.zeros(batch + (k, k))
    Fb = np.zeros(batch + (k, k))
    Gh = np.zeros(batch + (k, k))
    Gb = np.zeros(batch + (k, k))
    for j in range(k):
        # Gamma-vectors E[H_j H_i], i < j
        gH = GH[..., j, :j]
        gB = GB[..., j, :j]
        pj = z_h[..., j] - eta_u * np.einsum("...i,...i->...", vF[..., :j], gH)
        qj = z_b[..., j] - eta_v * np.einsum("...i,...i->...", vG[..., :j], gB)
        # gradients of p_j, q_j w.r.t. z_h[:k], z_b[:k]
        dp_h = -eta_u * np.einsum("...mi,...i->...m", Fh[..., :, :j], gH)
        dp_b = -eta_u * np.einsum("...mi,...i->...m", Fb[..., :, :j], gH)
        dq_h = -eta_v * np.einsum("...mi,...i->...m", Gh[..., :, :j], gB)
        dq_b = -eta_v * np.einsum("...mi,...i->...m", Gb[..., :, :j], gB)
        dp_h[..., j] += 1.0
        dq_b[..., j] += 1.0
        r0, r1, r2 = act.rho(pj), act.d1(pj), act.d2(pj)
        vF[..., j] = r1 * qj
        vG[..., j] = r0
        p[..., j] = pj
        q[..., j] = qj
        Fh[..., :, j] = (r2 * qj)[..., None] * dp_h + r1[..., None] * dq_h
        Fb[..., :, j] = (r2 * qj)[..., None] * dp_b + r1[..., None] * dq_b
        Gh[..., :, j] = r1[..., None] * dp_h
        Gb[..., :, j] = r1[..., None] * dp_b
    return SkeletonVectors(vF, vG, Fh, Fb, Gh, Gb, p, q)


def next_pq(sv: SkeletonVectors, cov: CovSlices, z_h_k, z_b_k, eta_u: float, eta_v: float):
    """p_k and q_k, which read the step-k Gamma-vectors (row k of the covariances)."""
    k = sv.k
    gH = cov.Gamma_H[..., k, :k]
    gB = cov.Gamma_B[..., k, :k]
    pk = z_h_k - eta_u * np.einsum("...i,...i->...", sv.vF, gH)
    qk = z_b_k - eta_v * np.einsum("...i,...i->...", sv.vG, gB)
    return pk, qk


def finite_skeleton_eval(h_traj, b_traj, z_h, z_b, k: int, act: ActivationSpec, eta_u: float, eta_v: float) -> SkeletonEvalFinite:
    """Finite-D skeleton maps f_0..f_k, g_0..g_k at one s, for trajectories (K, D)."""
    h_traj = np.asarray(h_traj, dtype=float)
    b_traj = np.asarray(b_traj, dtype=float)
    if k > h_traj.shape[0]:
        raise InvalidInputError("k exceeds the number of recorded passes")
    D = h_traj.shape[1]
    f = [np.zeros(D)]
    g = [np.zeros(D)]
    for j in range(k):
        hj, bj = h_traj[j], b_traj[j]
        pre = z_h[j] + hj @ f[j] / D
        back = z_b[j] + bj @ g[j] / D
        f.append(f[j] - eta_u * act.d1(pre) * back * hj)
        g.append(g[j] - eta_v * act.rho(pre) * bj)
    return SkeletonEvalFinite(f, g)


def covariance_oracle(cov: CovSlices) -> Callable:
    """Expectation oracle backed by known second moments: E[X_j sum_i c_i X_i]."""

    def oracle(kind, j, coeffs):
        G = cov.Gamma_H if kind == "h" else cov.Gamma_B
        n = len(coeffs)
        return float(G[j, :n] @ coeffs)

    return oracle


def ensemble_oracle(H, B) -> Callable:
    """Expectation oracle backed by particle averages; H, B are (P, K) realizations."""
    H = np.asarray(H, dtype=float)
    B = np.asarray(B, dtype=float)

    def oracle(kind, j, coeffs):
        X = H if kind == "h" else B
        n = len(coeffs)
        return float(np.mean(X[:, j] * (X[:, :n] @ coeffs)))

    return oracle


def mf_skeleton_eval(H_sample, B_sample, oracle: Callable, z_h, z_b, k: int, act: ActivationSpec, eta_u: float, eta_v: float):
    """Mean-field skeleton values (F_k, G_k) for one realization (H, B).

    F_j and G_j are linear in the realization (F_j = alpha_j . H_{<j}), so the
    recursion carries coefficient vectors and asks ``oracle`` for
    E[H_j F_j] and E[B_j G_j].
    """
    H_sample = np.asarray(H_sample, dtype=float)
    B_sample = np.asarray(B_sample, dtype=float)
    alpha = np.zeros(0)
    beta = np.zeros(0)
    for j in range(k):
        pre = z_h[j] + oracle("h", j, alpha)
        back = z_b[j] + oracle("b", j, beta)
        alpha = np.append(alpha, -eta_u * act.d1(pre) * back)
        beta = np.append(beta, -eta_v * act.rho(pre))
    return float(alpha @ H_sample[:k]), float(beta @ B_sample[:k])


def linear_phi(sign: int, m: int, i: int, d: int, cov: CovSlices, a: float, eta_u: float, eta_v: float) -> float:
    """Sum over increasing index paths i = u_0 < ... < u_m = i+d of alternating kernel products.

    The kernel at hop l is eta_u*Gamma^H when (-1)^l * sign = +1 and
    eta_v*Gamma^B otherwise.
    """
    if m == 0:
        return 1.0 if d == 0 else 0.0
    if d < m:
        return 0.0
    kern = {1: eta_u * cov.Gamma_H, -1: eta_v * cov.Gamma_B}
    end = i + d

    @lru_cache(maxsize=None)
    def paths(hops: int, start: int) -> float:
        # sum over increasing paths from `start` to `end` taking `hops` hops,
        # where the first of these hops has global index m - hops
        if hops == 0:
            return 1.0 if start == end else 0.0
        level = m - hops
        K_l = kern[sign * (-1) ** level]
        total = 0.0
        for nxt in range(start + 1, end - hops + 2):
            total += K_l[start, nxt] * paths(hops - 1, nxt)
        return total

    return (-a) ** m * paths(m, i)


def linear_gradients_phi(cov: CovSlices, k: int, a: float, eta_u: float, eta_v: float):
    """Linear-case gradient matrices (Fh, Fb, Gh, Gb) assembled from the path sums."""
    Fh, Fb, Gh, Gb = (np.zeros((k, k)) for _ in range(4))
    for i in range(k):
        for d in range(k - i):
            for m in range(d + 1):
                plus = linear_phi(+1, m, i, d, cov, a, eta_u, eta_v)
                minus = linear_phi(-1, m, i, d, cov, a, eta_u, eta_v)
                if m % 2:
                    Fh[i, i + d] += a * minus
                    Gb[i, i + d] += a * plus
                else:
                    Fb[i, i + d] += a * plus
                    Gh[i, i + d] += a * minus
    return Fh, Fb, Gh, Gb
