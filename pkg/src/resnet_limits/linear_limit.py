"""Exact infinite-size limit for a linear activation rho(x) = a x.

With a linear activation the limit law is Gaussian and linear in the
embedding row (w_in, w_out), so second moments close under a sequence of
linear ODE systems in s. For each training step k:

* forward from s = 0: the row Gamma^H_{k,<k}, the row Lambda_{k,<k}, the
  diagonal Gamma^H_{k,k} and the cross moments xi^H_k = E[W H_k];
* y_k = E[H_k(1) W_out];
* backward from s = 1: Gamma^B_{k,<k}, Lambda_{<k,k}, Gamma^B_{k,k} and
  xi^B_k = E[W B_k], with terminal data built from y_k - y*.

The dynamics are dH_k = Gvec^H_k^T M_k B_{<k} and
dB_k = -Gvec^B_k^T M_k^T H_{<k} with the interaction matrix of
:func:`linear_m_matrix`. Lambda_{i,j} = E[H_i B_j].

Past quantities are needed halfway through each RK4 step; they are stored on
a half grid filled by cubic Hermite interpolation of node values and their
exact derivatives, which keeps the scheme fourth order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import activations
from .errors import ContractViolationError, InvalidConfigError, InvalidInputError, NumericalOverflowError
from .numerics import SGrid, hermite_midpoint, rk4_step
from .resnet import HPConfig
from .skeleton import CovSlices, skeleton_vectors


@dataclass
class LinearLimitConfig:
    a: float
    x: np.ndarray
    y_star: np.ndarray
    K: int
    hp: HPConfig = field(default_factory=HPConfig)
    grid: SGrid = field(default_factory=SGrid)
    lam_tol: float = 1e-6

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.y_star = np.asarray(self.y_star, dtype=float).reshape(-1)
        if self.K < 1:
            raise InvalidConfigError("K must be >= 1")
        if self.x.size < 1 or self.y_star.size < 1:
            raise InvalidConfigError("x and y_star must be non-empty")


@dataclass
class CovarianceState:
    """Second moments of the limit law, on the half grid s = t / (2 n_steps).

    Arrays carry a leading half-grid axis of length 2 n_steps + 1 followed by
    step indices 0..k. ``Xi_H[t, j]`` concatenates E[W_in H_j] and
    E[W_out H_j]; ``M[j-1]`` holds M_j on the half grid.
    """

    cfg: LinearLimitConfig
    k: int
    Gamma_H: np.ndarray
    Gamma_B: np.ndarray
    Lambda: np.ndarray
    Xi_H: np.ndarray
    Xi_B: np.ndarray
    y: np.ndarray  # (k+1, d_out)
    M: list
    lam_gap: list = field(default_factory=list)

    @property
    def grid(self) -> SGrid:
        return self.cfg.grid

    @property
    def d_in(self) -> int:
        return self.cfg.x.size

    def nodes(self, arr):
        return arr[::2]

    @property
    def Xi_H_in(self):
        return self.Xi_H[::2, :, : self.d_in]

    @property
    def Xi_H_out(self):
        return self.Xi_H[::2, :, self.d_in :]

    @property
    def Xi_B_in(self):
        return self.Xi_B[::2, :, : self.d_in]

    @property
    def Xi_B_out(self):
        return self.Xi_B[::2, :, self.d_in :]

    def to_json(self) -> dict:
        return {
            "a": self.cfg.a,
            "k": self.k,
            "n_steps": self.grid.n_steps,
            "s": self.grid.points.tolist(),
            "Gamma_H": self.nodes(self.Gamma_H).tolist(),
            "Gamma_B": self.nodes(self.Gamma_B).tolist(),
            "Lambda_HB": self.nodes(self.Lambda).tolist(),
            "Xi_H_in": self.Xi_H_in.tolist(),
            "Xi_H_out": self.Xi_H_out.tolist(),
            "Xi_B_in": self.Xi_B_in.tolist(),
            "Xi_B_out": self.Xi_B_out.tolist(),
            "y": self.y.tolist(),
            "lambda_kk_gap": list(self.lam_gap),
        }


def _m_from_cov(GH, GB, k: int, a: float, hp: HPConfig) -> np.ndarray:
    """M_k from past covariances (..., k, k); broadcasts over leading axes."""
    batch = GH.shape[:-2]
    zeros = np.zeros(batch + (k,))
    sv = skeleton_vectors(CovSlices(GH, GB), zeros, zeros, k, activations.linear(a), hp.eta_u, hp.eta_v)
    eye = np.eye(k)
    Fh, Fb, Gh, Gb = sv.grad_h_vF, sv.grad_b_vF, sv.grad_h_vG, sv.grad_b_vG
    su2, sv2 = hp.sigma_u**2, hp.sigma_v**2
    term_b = np.swapaxes(Fb, -1, -2) @ (eye - hp.eta_v * GB[..., :k, :k] @ Gb)
    term_h = (eye - hp.eta_u * np.swapaxes(Fh, -1, -2) @ GH[..., :k, :k]) @ Gh
    return -a * (hp.eta_u * sv2 * term_b + hp.eta_v * su2 * term_h)


def linear_m_matrix(state: CovarianceState, s_index: int, k: int) -> np.ndarray:
    """M_k at grid node ``s_index``: the k x k interaction matrix of step k."""
    if not 1 <= k <= state.k + 1:
        raise InvalidInputError(f"M_{k} needs covariances through step {k - 1}")
    t = 2 * s_index
    return _m_from_cov(state.Gamma_H[t, :k, :k], state.Gamma_B[t, :k, :k], k, state.cfg.a, state.cfg.hp)


def _grad_loss(state_y, cfg):
    return state_y - cfg.y_star


def _initial_state(cfg: LinearLimitConfig) -> CovarianceState:
    hp = cfg.hp
    T = 2 * cfg.grid.n_steps + 1
    d_in, d_out = cfg.x.size, cfg.y_star.size
    s_in2, s_out2 = hp.sigma_in**2, hp.sigma_out**2
    y0 = np.zeros(d_out)
    g0 = _grad_loss(y0, cfg)
    GH = np.full((T, 1, 1), s_in2 * float(cfg.x @ cfg.x))
    GB = np.full((T, 1, 1), s_out2 * float(g0 @ g0))
    Lam = np.zeros((T, 1, 1))
    XiH = np.zeros((T, 1, d_in + d_out))
    XiB = np.zeros((T, 1, d_in + d_out))
    XiH[:, 0, :d_in] = s_in2 * cfg.x
    XiB[:, 0, d_in:] = s_out2 * g0
    return CovarianceState(cfg, 0, GH, GB, Lam, XiH, XiB, y0[None, :], [], [0.0])


def _grow(arr, square=True):
    """Add one step index: to both step axes of a (T, n, n) array, or axis 1 of (T, n, d)."""
    return np.pad(arr, [(0, 0), (0, 1), (0, 1) if square else (0, 0)])


def _integrate(rhs, y0, forward: bool, n_steps: int, k: int):
    """RK4 over the node grid; rhs(t, y) reads the half-grid index t. Returns node states and derivatives."""
    ds = 1.0 / n_steps
    Y = np.empty((n_steps + 1, y0.size))
    order = range(n_steps + 1) if forward else range(n_steps, -1, -1)
    idx = list(order)
    Y[idx[0]] = y0

    def f(s, y):
        return rhs(int(round(2 * s * n_steps)), y)

    y = y0
    for a, b in zip(idx[:-1], idx[1:]):
        try:
            y = rk4_step(f, y, a * ds, (b - a) * ds)
        except NumericalOverflowError as exc:
            raise NumericalOverflowError("linear limit diverged", k=k, **exc.context) from exc
        Y[b] = y
    dY = np.stack([rhs(2 * n, Y[n]) for n in range(n_steps + 1)])
    return Y, dY


def _half(Y, dY, ds):
    """Node values plus Hermite midpoints, on the half grid."""
    out = np.empty((2 * Y.shape[0] - 1,) + Y.shape[1:])
    out[::2] = Y
    out[1::2] = hermite_midpoint(Y[:-1], Y[1:], dY[:-1], dY[1:], ds)
    return out


def linear_limit_step(state: CovarianceState, k: int) -> CovarianceState:
    """Extend a state complete through step k-1 by step k."""
    if k != state.k + 1:
        raise InvalidInputError(f"state holds steps 0..{state.k}; cannot add step {k}")
    cfg, hp = state.cfg, state.cfg.hp
    S = cfg.grid.n_steps
    ds = cfg.grid.ds
    d_in = cfg.x.size
    d = state.Xi_H.shape[-1]
    s_in2, s_out2 = hp.sigma_in**2, hp.sigma_out**2

    GH, GB, Lam = state.Gamma_H, state.Gamma_B, state.Lambda
    XiH, XiB = state.Xi_H, state.Xi_B
    Mk = _m_from_cov(GH, GB, k, cfg.a, hp)  # (T, k, k)
    Ms = state.M + [Mk]
    # past drift vectors: dH_j = alpha_j . B_{<j}, dB_j = -beta_j . H_{<j}
    alphas = [np.einsum("tba,tb->ta", Ms[j - 1], GH[:, j, :j]) for j in range(1, k)]
    betas = [np.einsum("tab,tb->ta", Ms[j - 1], GB[:, j, :j]) for j in range(1, k)]

    def fwd(t, y):
        gvec, lam, xi = y[:k], y[k : 2 * k], y[2 * k + 1 :]
        alpha = Mk[t].T @ gvec
        dg = Lam[t] @ alpha
        dl = GB[t] @ alpha
        for j in range(1, k):
            dg[j] += alphas[j - 1][t] @ lam[:j]
            dl[j] -= betas[j - 1][t] @ gvec[:j]
        return np.concatenate([dg, dl, [2.0 * alpha @ lam], XiB[t].T @ alpha])

    y0 = np.concatenate([
        np.full(k, s_in2 * float(cfg.x @ cfg.x)),
        XiB[0, :, :d_in] @ cfg.x,
        [s_in2 * float(cfg.x @ cfg.x)],
        np.concatenate([s_in2 * cfg.x, np.zeros(d - d_in)]),
    ])
    Yf, dYf = _integrate(fwd, y0, True, S, k)
    Hf = _half(Yf, dYf, ds)
    xi_h = Hf[:, 2 * k + 1 :]
    y_k = xi_h[-1, d_in:].copy()
    g_k = _grad_loss(y_k, cfg)
    g_past = _grad_loss(state.y, cfg)

    # new forward rows enter the past data that the backward pass reads
    gH_row, lam_row = Hf[:, :k], Hf[:, k : 2 * k]
    GH2 = _grow(GH)
    GH2[:, k, :k] = gH_row
    GH2[:, :k, k] = gH_row
    GH2[:, k, k] = Hf[:, 2 * k]
    XiH2 = _grow(XiH, square=False)
    XiH2[:, k] = xi_h

    def bwd(t, y):
        gvec, lam = y[:k], y[k : 2 * k]
        beta = Mk[t] @ gvec
        dg = -(Lam[t].T @ beta)
        dl = -(GH[t] @ beta)
        for j in range(1, k):
            dg[j] -= betas[j - 1][t] @ lam[:j]
            dl[j] += alphas[j - 1][t] @ gvec[:j]
        return np.concatenate([dg, dl, [-2.0 * beta @ lam], -(XiH[t].T @ beta)])

    y1 = np.concatenate([
        s_out2 * (g_past @ g_k),
        XiH[-1, :, d_in:] @ g_k,
        [s_out2 * float(g_k @ g_k)],
        np.concatenate([np.zeros(d_in), s_out2 * g_k]),
    ])
    Yb, dYb = _integrate(bwd, y1, False, S, k)
    Hb = _half(Yb, dYb, ds)

    lam_fwd = float(g_k @ xi_h[-1, d_in:])
    lam_bwd = float(cfg.x @ Hb[0, 2 * k + 1 : 2 * k + 1 + d_in])
    gap = abs(lam_fwd - lam_bwd)
    if gap > cfg.lam_tol * max(1.0, abs(lam_fwd)):
        raise ContractViolationError(f"Lambda_kk reconstructions disagree at k={k}: {lam_fwd} vs {lam_bwd}")

    GB2 = _grow(GB)
    GB2[:, k, :k] = Hb[:, :k]
    GB2[:, :k, k] = Hb[:, :k]
    GB2[:, k, k] = Hb[:, 2 * k]
    Lam2 = _grow(Lam)
    Lam2[:, k, :k] = lam_row
    Lam2[:, :k, k] = Hb[:, k : 2 * k]
    Lam2[:, k, k] = lam_fwd
    XiB2 = _grow(XiB, square=False)
    XiB2[:, k] = Hb[:, 2 * k + 1 :]
    y_all = np.vstack([state.y, y_k])
    return CovarianceState(cfg, k, GH2, GB2, Lam2, XiH2, XiB2, y_all, Ms, state.lam_gap + [gap])


def linear_limit_run(cfg: LinearLimitConfig) -> CovarianceState:
    """Steps 0..K-1."""
    state = _initial_state(cfg)
    # blow-up is reported by the step's own norm check
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, cfg.K):
            state = linear_limit_step(state, k)
    return state


def limit_outputs(state: CovarianceState) -> np.ndarray:
    return state.y.copy()


def _phi(state: CovarianceState, s_index: Optional[int]):
    hp = state.cfg.hp
    d_in = state.d_in
    if hp.sigma_in == 0 or hp.sigma_out == 0:
        raise InvalidConfigError("coupled reconstruction needs sigma_in > 0 and sigma_out > 0")
    scale = np.concatenate([np.full(d_in, hp.sigma_in**-2), np.full(state.Xi_H.shape[-1] - d_in, hp.sigma_out**-2)])
    XiH, XiB = state.nodes(state.Xi_H), state.nodes(state.Xi_B)
    if s_index is not None:
        XiH, XiB = XiH[s_index], XiB[s_index]
    return XiH * scale, XiB * scale


def coupled_limit_sample(state: CovarianceState, w_in_row, w_out_row, s_index: Optional[int] = None):
    """Limit coordinate trajectories (H_j, B_j), j = 0..k, driven by one embedding row.

    H_j(s) is linear in (w_in, w_out) with coefficients Xi / sigma^2. Returns
    arrays (k+1,) at grid node ``s_index``, or (n_steps+1, k+1) when omitted.
    """
    w = np.concatenate([np.asarray(w_in_row, float), np.asarray(w_out_row, float)])
    PH, PB = _phi(state, s_index)
    return PH @ w, PB @ w


def coupled_limit_hidden(state: CovarianceState, W_in, W_out, s_index: int) -> np.ndarray:
    """H_j(s) for every row of the embedding matrices: (k+1, D)."""
    W = np.hstack([np.asarray(W_in, float), np.asarray(W_out, float)])
    PH, _ = _phi(state, s_index)
    return PH @ W.T
