"""Monte-Carlo fixed-point solver for the nonlinear limit system, and the large-network proxy.

Given the law of the past passes, step k is two McKean-Vlasov problems:

    dH_k/ds = c_k(s) . B_{<k}(s),                 H_k(0) = W_in . x
    dB_k/ds = d_k(s) . H_{<k}(s) + e_k(s) H_k(s),  B_k(1) = W_out . (y_k - y*)

whose coefficients are Gaussian expectations over (Z^h, Z^b) with
covariance diag(sigma_u^2 Gamma^H, sigma_v^2 Gamma^B) at the same s. The
coefficients of H_k depend on the law of H_k itself (and likewise for B_k),
so each pass is solved by Picard iteration: freeze the law, estimate the
coefficients by Monte Carlo, integrate every particle, repeat.

Expectations over the embedding law are particle averages. Because every
trajectory is linear in the embedding row, the solver also carries one
"ghost" particle per unit row; these never enter the averages and give the
coupled limit trajectory of any embedding row exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .activations import ActivationSpec
from .errors import InvalidConfigError, InvalidInputError, NonConvergenceError
from .numerics import DistKind, RngState, SGrid, hermite_midpoint, psd_sqrt, sample_centered
from .resnet import Dataset, HPConfig, ShapeConfig, TrainRecord, embedding_rows, init_params, train
from .skeleton import CovSlices, next_pq, skeleton_vectors

PROXY_SHAPE = ShapeConfig(64, 512, 256)
LARGE_PROXY_SHAPE = ShapeConfig(50, 2000, 2000)  # full-scale proxy; far beyond desk budgets


@dataclass
class DmftConfig:
    x: np.ndarray
    y_star: np.ndarray
    K: int
    act: ActivationSpec
    hp: HPConfig = field(default_factory=HPConfig)
    grid: SGrid = field(default_factory=lambda: SGrid(100))
    P: int = 2000
    n_mc: int = 2000
    picard_tol: float = 1e-4
    picard_max_iters: int = 50
    damping: float = 0.5
    t_chunk: int = 51

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y_star = np.asarray(self.y_star, dtype=float)
        if self.x.ndim != 1 or self.y_star.ndim != 1:
            raise InvalidConfigError("the limit solver handles a single datapoint (N = 1)")
        if self.P < 100:
            raise InvalidConfigError("P must be >= 100")
        if not self.picard_tol > 0:
            raise InvalidConfigError("picard_tol must be > 0")
        if self.K < 1 or self.n_mc < 1 or self.picard_max_iters < 1:
            raise InvalidConfigError("K, n_mc and picard_max_iters must be positive")
        if not 0 < self.damping <= 1:
            raise InvalidConfigError("damping must lie in (0, 1]")


@dataclass
class PicardReport:
    k: int
    direction: str  # "forward" or "backward"
    residuals: list
    converged: bool
    damped: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def to_dict(self):
        return {"k": self.k, "pass": self.direction, "iterations": self.iterations,
                "residuals": list(self.residuals), "converged": self.converged, "damped": self.damped}


@dataclass
class ParticleEnsemble:
    """Embedding rows and trajectories on the half grid s = t / (2 n_steps).

    ``H[i, j, t]`` is pass j of particle i. Rows P.. are the ghost particles
    (unit embedding rows), excluded from every average.
    """

    grid: SGrid
    W_in: np.ndarray  # (P + d, d_in)
    W_out: np.ndarray  # (P + d, d_out)
    H: np.ndarray  # (P + d, K, T)
    B: np.ndarray
    P: int
    y: list = field(default_factory=list)
    k_done: int = -1
    reports: list = field(default_factory=list)

    @property
    def real(self) -> slice:
        return slice(0, self.P)

    def nodes(self, arr):
        return arr[..., ::2]

    def coupled_hidden(self, W_in, W_out, s_index: int) -> np.ndarray:
        """H_j(s) for arbitrary embedding rows, from the ghost particles: (k_done+1, D)."""
        d_in = self.W_in.shape[1]
        ghosts = self.H[self.P :, : self.k_done + 1, 2 * s_index]  # (d, k+1)
        W = np.hstack([np.asarray(W_in, float), np.asarray(W_out, float)])
        return (W @ ghosts).T


@dataclass
class GaussianFieldSample:
    Zh: np.ndarray  # (T, n_mc, n_h)
    Zb: np.ndarray  # (T, n_mc, n_b)


def particle_mean(X) -> np.ndarray:
    """Mean over the leading (particle) axis, summed in sorted order so it is permutation invariant."""
    X = np.asarray(X, dtype=float)
    return np.sort(X, axis=0).sum(axis=0) / X.shape[0]


def _gram(X, rows=None) -> np.ndarray:
    """(1/P) sum_i X^i_a X^i_b for X of shape (P, n, T), returned as (T, n, n).

    With ``rows`` given, only those rows (and the mirrored columns) are filled.
    """
    n, T = X.shape[1], X.shape[2]
    G = np.zeros((T, n, n))
    for a in range(n) if rows is None else rows:
        row = particle_mean(X[:, a : a + 1, :] * X)  # (n, T)
        G[:, a, :] = row.T
        G[:, :, a] = row.T
    return G


def empirical_covariances(ens: ParticleEnsemble, k: int) -> CovSlices:
    """(1/P) sum_i X^i X^i^T over passes 0..k, per half-grid point: (T, k+1, k+1)."""
    if k > ens.H.shape[1] - 1:
        raise InvalidInputError("k beyond allocated passes")
    sl = ens.real
    return CovSlices(_gram(ens.H[sl, : k + 1]), _gram(ens.B[sl, : k + 1]))


def field_from_normals(cov: CovSlices, xi_h, xi_b, sigma_u: float, sigma_v: float) -> GaussianFieldSample:
    """Z = sqrt(sigma^2 Gamma) xi per grid point, with Z^h and Z^b independent."""
    Ah = psd_sqrt(sigma_u**2 * cov.Gamma_H)
    Ab = psd_sqrt(sigma_v**2 * cov.Gamma_B)
    Zh = np.einsum("tij,nj->tni", Ah, xi_h)
    Zb = np.einsum("tij,nj->tni", Ab, xi_b)
    return GaussianFieldSample(Zh, Zb)


def gaussian_field_draws(cov: CovSlices, n_mc: int, rng: RngState, sigma_u: float = 1.0, sigma_v: float = 1.0) -> GaussianFieldSample:
    """n_mc draws per grid point with block-diagonal covariance diag(sigma_u^2 Gamma^H, sigma_v^2 Gamma^B)."""
    GH = np.asarray(cov.Gamma_H, float)
    GB = np.asarray(cov.Gamma_B, float)
    if GH.ndim == 2:
        GH, GB = GH[None], GB[None]
    std = DistKind("gaussian", 1.0)
    xi_h = sample_centered(rng.child("h"), std, (n_mc, GH.shape[-1]))
    xi_b = sample_centered(rng.child("b"), std, (n_mc, GB.shape[-1]))
    return field_from_normals(CovSlices(GH, GB), xi_h, xi_b, sigma_u, sigma_v)


def forward_coefficients(GH, GB, xi_h, xi_b, act: ActivationSpec, hp: HPConfig, t_chunk: int = 51) -> np.ndarray:
    """c_k(s) for every half-grid point: (T, k).

    GH is Gamma^H over passes 0..k, GB is Gamma^B over passes 0..k-1.
    c = -(eta_u sigma_v^2 E[rho'(P_k) grad_b v^F] Gvec^H_k + eta_v E[rho(P_k) v^G]).
    """
    k = GH.shape[-1] - 1
    out = np.empty((GH.shape[0], k))
    for a in range(0, GH.shape[0], t_chunk):
        gh, gb = GH[a : a + t_chunk], GB[a : a + t_chunk]
        Z = field_from_normals(CovSlices(gh, gb), xi_h, xi_b, hp.sigma_u, hp.sigma_v)
        cov = CovSlices(gh[:, None], gb[:, None])
        sv = skeleton_vectors(cov, Z.Zh, Z.Zb, k, act, hp.eta_u, hp.eta_v)
        P_k = Z.Zh[..., k] - hp.eta_u * np.einsum("tni,ti->tn", sv.vF, gh[:, k, :k])
        gvec = gh[:, k, :k]
        t1 = np.einsum("tnji,tn->tji", sv.grad_b_vF, act.d1(P_k)) / xi_h.shape[0]
        t1 = np.einsum("tji,ti->tj", t1, gvec)
        t2 = np.einsum("tnj,tn->tj", sv.vG, act.rho(P_k)) / xi_h.shape[0]
        out[a : a + t_chunk] = -(hp.eta_u * hp.sigma_v**2 * t1 + hp.eta_v * t2)
    return out


def backward_coefficients(GH, GB, xi_h, xi_b, act: ActivationSpec, hp: HPConfig, t_chunk: int = 51):
    """(d_k(s), e_k(s)) for every half-grid point: (T, k) and (T,).

    d = eta_v sigma_u^2 E[rho'(P) grad_h v^G] Gvec^B_k + eta_u E[rho'(P) Q v^F]
        + sigma_u^2 eta_u E[rho''(P) Q grad_h v^F] Gvec^H_k
    e = -sigma_u^2 E[rho''(P) Q]
    """
    k = GH.shape[-1] - 1
    n = xi_h.shape[0]
    d_out = np.empty((GH.shape[0], k))
    e_out = np.empty(GH.shape[0])
    su2 = hp.sigma_u**2
    for a in range(0, GH.shape[0], t_chunk):
        gh, gb = GH[a : a + t_chunk], GB[a : a + t_chunk]
        Z = field_from_normals(CovSlices(gh, gb), xi_h, xi_b, hp.sigma_u, hp.sigma_v)
        cov = CovSlices(gh[:, None], gb[:, None])
        sv = skeleton_vectors(cov, Z.Zh, Z.Zb, k, act, hp.eta_u, hp.eta_v)
        P_k, Q_k = next_pq(sv, cov, Z.Zh[..., k], Z.Zb[..., k], hp.eta_u, hp.eta_v)
        r1, r2 = act.d1(P_k), act.d2(P_k)
        gH, gB = gh[:, k, :k], gb[:, k, :k]
        t1 = np.einsum("tji,ti->tj", np.einsum("tnji,tn->tji", sv.grad_h_vG, r1) / n, gB)
        t2 = np.einsum("tnj,tn->tj", sv.vF, r1 * Q_k) / n
        t3 = np.einsum("tji,ti->tj", np.einsum("tnji,tn->tji", sv.grad_h_vF, r2 * Q_k) / n, gH)
        d_out[a : a + t_chunk] = hp.eta_v * su2 * t1 + hp.eta_u * t2 + su2 * hp.eta_u * t3
        e_out[a : a + t_chunk] = -su2 * np.mean(r2 * Q_k, axis=1)
    return d_out, e_out


def _integrate(f_half, start, h, forward: bool):
    """Integrate an s-explicit field given on the half grid (RK4 reduces to Simpson).

    f_half: (n, T); start: (n,) value at s=0 (forward) or s=1 (backward).
    Returns trajectories on the half grid, midpoints from cubic Hermite.
    """
    inc = h / 6.0 * (f_half[:, 0:-1:2] + 4.0 * f_half[:, 1::2] + f_half[:, 2::2])
    n_nodes = inc.shape[1] + 1
    nodes = np.empty((f_half.shape[0], n_nodes))
    if forward:
        nodes[:, 0] = start
        nodes[:, 1:] = start[:, None] + np.cumsum(inc, axis=1)
    else:
        nodes[:, -1] = start
        nodes[:, :-1] = start[:, None] - np.cumsum(inc[:, ::-1], axis=1)[:, ::-1]
    out = np.empty_like(f_half)
    out[:, ::2] = nodes
    fn = f_half[:, ::2]
    out[:, 1::2] = hermite_midpoint(nodes[:, :-1], nodes[:, 1:], fn[:, :-1], fn[:, 1:], h)
    return out


def _picard(update, X0, cfg: DmftConfig, k: int, direction: str):
    """Iterate X <- update(X) with oscillation-triggered damping."""
    X = X0
    residuals, damped = [], False
    for _ in range(cfg.picard_max_iters):
        X_new = update(X)
        res = float(np.max(np.abs(X_new - X)))
        if len(residuals) >= 2 and (residuals[-1] - residuals[-2]) < 0 < (res - residuals[-1]):
            damped = True
        residuals.append(res)
        X = X + cfg.damping * (X_new - X) if damped else X_new
        if res < cfg.picard_tol:
            return X, PicardReport(k, direction, residuals, True, damped)
    raise NonConvergenceError(f"Picard iteration for step {k} ({direction}) did not converge", residuals=residuals)


def init_ensemble(cfg: DmftConfig, rng: RngState) -> ParticleEnsemble:
    hp = cfg.hp
    d_in, d_out = cfg.x.size, cfg.y_star.size
    W_in = sample_centered(rng.child("W_in"), DistKind(hp.dist, hp.sigma_in**2), (cfg.P, d_in))
    W_out = sample_centered(rng.child("W_out"), DistKind(hp.dist, hp.sigma_out**2), (cfg.P, d_out))
    eye = np.eye(d_in + d_out)
    W_in = np.vstack([W_in, eye[:, :d_in]])
    W_out = np.vstack([W_out, eye[:, d_in:]])
    T = 2 * cfg.grid.n_steps + 1
    n = W_in.shape[0]
    H = np.zeros((n, cfg.K, T))
    B = np.zeros((n, cfg.K, T))
    return ParticleEnsemble(cfg.grid, W_in, W_out, H, B, cfg.P)


def _output(ens: ParticleEnsemble, k: int) -> np.ndarray:
    sl = ens.real
    return particle_mean(ens.H[sl, k, -1][:, None] * ens.W_out[sl])


def dmft_forward_step(ens: ParticleEnsemble, k: int, cfg: DmftConfig, rng: RngState) -> ParticleEnsemble:
    """Fill H_k for every particle; k = 0 is the base case H_0(s) = W_in . x."""
    if k != ens.k_done + 1:
        raise InvalidInputError(f"ensemble holds passes 0..{ens.k_done}; cannot run forward step {k}")
    h0 = ens.W_in @ cfg.x
    if k == 0:
        ens.H[:, 0, :] = h0[:, None]
        return ens
    h = cfg.grid.ds
    std = DistKind("gaussian", 1.0)
    xi_h = sample_centered(rng.child(f"Z.k{k}.fwd.h"), std, (cfg.n_mc, k + 1))
    xi_b = sample_centered(rng.child(f"Z.k{k}.fwd.b"), std, (cfg.n_mc, k))
    sl = ens.real
    GB = _gram(ens.B[sl, :k])
    GH = _gram(ens.H[sl, : k + 1], rows=range(k))
    B_past = ens.B[:, :k]

    def update(Hk):
        ens.H[:, k] = Hk
        GH[:, k, :] = _gram(ens.H[sl, : k + 1], rows=[k])[:, k, :]
        GH[:, :, k] = GH[:, k, :]
        c = forward_coefficients(GH, GB, xi_h, xi_b, cfg.act, cfg.hp, cfg.t_chunk)
        f = np.einsum("tj,pjt->pt", c, B_past)
        return _integrate(f, h0, h, forward=True)

    Hk0 = np.repeat(h0[:, None], ens.H.shape[2], axis=1)
    Hk, report = _picard(update, Hk0, cfg, k, "forward")
    ens.H[:, k] = Hk
    ens.reports.append(report)
    return ens


def dmft_backward_step(ens: ParticleEnsemble, k: int, cfg: DmftConfig, rng: RngState) -> ParticleEnsemble:
    """Set y_k, then fill B_k backward from s = 1."""
    y_k = _output(ens, k)
    g = y_k - cfg.y_star
    b1 = ens.W_out @ g
    ens.y.append(y_k)
    if k == 0:
        ens.B[:, 0, :] = b1[:, None]
        ens.k_done = 0
        return ens
    h = cfg.grid.ds
    std = DistKind("gaussian", 1.0)
    xi_h = sample_centered(rng.child(f"Z.k{k}.bwd.h"), std, (cfg.n_mc, k + 1))
    xi_b = sample_centered(rng.child(f"Z.k{k}.bwd.b"), std, (cfg.n_mc, k + 1))
    sl = ens.real
    GH = _gram(ens.H[sl, : k + 1])
    GB = _gram(ens.B[sl, : k + 1], rows=range(k))
    H_past, H_k = ens.H[:, :k], ens.H[:, k]

    def update(Bk):
        ens.B[:, k] = Bk
        GB[:, k, :] = _gram(ens.B[sl, : k + 1], rows=[k])[:, k, :]
        GB[:, :, k] = GB[:, k, :]
        d, e = backward_coefficients(GH, GB, xi_h, xi_b, cfg.act, cfg.hp, cfg.t_chunk)
        f = np.einsum("tj,pjt->pt", d, H_past) + e[None, :] * H_k
        return _integrate(f, b1, h, forward=False)

    Bk0 = np.repeat(b1[:, None], ens.B.shape[2], axis=1)
    Bk, report = _picard(update, Bk0, cfg, k, "backward")
    ens.B[:, k] = Bk
    ens.reports.append(report)
    ens.k_done = k
    return ens


def dmft_run(cfg: DmftConfig, rng: RngState):
    """Passes 0..K-1; returns (ensemble, y list)."""
    ens = init_ensemble(cfg, rng.child("embed"))
    for k in range(cfg.K):
        ens = dmft_forward_step(ens, k, cfg, rng)
        ens = dmft_backward_step(ens, k, cfg, rng)
    return ens, np.array(ens.y)


def summary(ens: ParticleEnsemble) -> dict:
    """JSON-ready covariance diagonals on the node grid, outputs and Picard diagnostics."""
    cov = empirical_covariances(ens, ens.k_done)
    GH = ens.nodes(np.moveaxis(cov.Gamma_H, 0, -1))
    GB = ens.nodes(np.moveaxis(cov.Gamma_B, 0, -1))
    return {
        "P": ens.P,
        "n_steps": ens.grid.n_steps,
        "s": ens.grid.points.tolist(),
        "Gamma_H": np.moveaxis(GH, -1, 0).tolist(),
        "Gamma_B": np.moveaxis(GB, -1, 0).tolist(),
        "y": np.array(ens.y).tolist(),
        "picard": [r.to_dict() for r in ens.reports],
    }


def reference_proxy(shape_big: ShapeConfig, hp: HPConfig, act: ActivationSpec, data: Dataset, K: int,
                    rng: RngState, embed_rng: Optional[RngState] = None, record_layers=None) -> TrainRecord:
    """A large finite network standing in for the limit.

    Block weights come from ``rng``; embedding rows from ``embed_rng`` (default
    ``rng``). Passing the small model's RngState as ``embed_rng`` shares its
    embedding rows as a prefix, which is the coupling delta_h needs.
    """
    params = init_params(shape_big, hp, rng)
    if embed_rng is not None:
        params.W_in, params.W_out = embedding_rows(shape_big, hp, embed_rng.child("embed"))
    rec = train(shape_big, hp, act, data, K, record_layers=record_layers, params=params)
    rec.meta.update({"proxy": True, "seed": rng.seed, "stream": rng.stream})
    return rec
