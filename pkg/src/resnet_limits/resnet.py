"""Finite ResNet with two-layer-perceptron blocks, trained by MLU-scaled full-batch GD.

Forward pass for a batch ``X`` of shape (N, d_in)::

    h0 = X W_in^T
    h_l = h_{l-1} + rho(h_{l-1} U_l / D) V_l^T / (M L)
    y = h_L W_out / D

Hidden states are row vectors (N, D); U and V are stored as (L, D, M).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .activations import ActivationSpec
from .errors import InvalidConfigError, NumericalOverflowError
from .numerics import DistKind, Family, RngState, sample_centered


@dataclass(frozen=True)
class ShapeConfig:
    L: int
    M: int
    D: int
    d_in: int = 3
    d_out: int = 3

    def __post_init__(self):
        for name in ("L", "M", "D", "d_in", "d_out"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"shape field {name} must be >= 1")

    @property
    def n_params(self) -> int:
        return self.D * (self.d_in + self.d_out) + 2 * self.L * self.M * self.D


@dataclass(frozen=True)
class HPConfig:
    eta_u: float = 1.0
    eta_v: float = 1.0
    sigma_u: float = 1.0
    sigma_v: float = 1.0
    sigma_in: float = 1.0
    sigma_out: float = 1.0
    dist: Family = Family.GAUSSIAN
    clip_bound: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "dist", Family(self.dist))
        for name in ("eta_u", "eta_v", "sigma_u", "sigma_v", "sigma_in", "sigma_out"):
            if not getattr(self, name) >= 0:
                raise InvalidConfigError(f"{name} must be >= 0")
        if self.clip_bound is not None and not self.clip_bound > 0:
            raise InvalidConfigError("clip_bound must be > 0 when set")


@dataclass
class ResNetParams:
    W_in: np.ndarray  # (D, d_in)
    W_out: np.ndarray  # (D, d_out)
    U: np.ndarray  # (L, D, M)
    V: np.ndarray  # (L, D, M)

    def copy(self) -> "ResNetParams":
        return ResNetParams(self.W_in.copy(), self.W_out.copy(), self.U.copy(), self.V.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (self.W_in, self.W_out, self.U, self.V)])

    def unflatten(self, flat) -> "ResNetParams":
        out, i = [], 0
        for a in (self.W_in, self.W_out, self.U, self.V):
            out.append(np.asarray(flat[i : i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return ResNetParams(*out)


@dataclass
class Dataset:
    X: np.ndarray  # (N, d_in)
    Y: np.ndarray  # (N, d_out)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[0] < 1:
            raise InvalidConfigError("dataset needs N >= 1 matching inputs and targets")

    @property
    def N(self) -> int:
        return self.X.shape[0]


@dataclass
class TrainRecord:
    """Hidden states and outputs recorded before each update, steps 0..K."""

    shape: ShapeConfig
    hidden: dict  # layer -> (K+1, N, D)
    outputs: np.ndarray  # (K+1, N, d_out)
    loss: np.ndarray  # (K+1,)
    W_in: np.ndarray
    W_out: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.outputs.shape[0] - 1


def embedding_rows(shape: ShapeConfig, hp: HPConfig, rng: RngState):
    """Embedding matrices drawn row by row, so the first D rows agree for any larger D."""
    dist_in = DistKind(hp.dist, hp.sigma_in**2)
    dist_out = DistKind(hp.dist, hp.sigma_out**2)
    W_in = sample_centered(rng.child("W_in"), dist_in, (shape.D, shape.d_in))
    W_out = sample_centered(rng.child("W_out"), dist_out, (shape.D, shape.d_out))
    return W_in, W_out


def init_params(shape: ShapeConfig, hp: HPConfig, rng: RngState) -> ResNetParams:
    """U, V entries have variance D*sigma^2; embeddings sigma_in^2, sigma_out^2."""
    W_in, W_out = embedding_rows(shape, hp, rng.child("embed"))
    du = DistKind(hp.dist, shape.D * hp.sigma_u**2)
    dv = DistKind(hp.dist, shape.D * hp.sigma_v**2)
    U = np.empty((shape.L, shape.D, shape.M))
    V = np.empty((shape.L, shape.D, shape.M))
    for layer in range(shape.L):
        U[layer] = sample_centered(rng.child(f"U.layer{layer + 1}"), du, (shape.D, shape.M))
        V[layer] = sample_centered(rng.child(f"V.layer{layer + 1}"), dv, (shape.D, shape.M))
    return ResNetParams(W_in, W_out, U, V)


def _clip(x, bound):
    return x if bound is None else np.clip(x, -bound, bound)


def forward_batch(params: ResNetParams, act: ActivationSpec, X, clip_bound=None):
    """Returns (hidden states list h_0..h_L each (N, D), preactivations list, y (N, d_out))."""
    L, D, M = params.U.shape
    h = np.atleast_2d(X) @ params.W_in.T
    hs, pre = [h], []
    scale = 1.0 / (M * L)
    for layer in range(L):
        # non-finite values are reported below, so numpy's own warning is noise
        with np.errstate(over="ignore", invalid="ignore"):
            a = _clip(h @ params.U[layer] / D, clip_bound)
            h = h + scale * (act.rho(a) @ params.V[layer].T)
        if not np.all(np.isfinite(h)):
            raise NumericalOverflowError("hidden state blew up", layer=layer + 1)
        pre.append(a)
        hs.append(h)
    y = h @ params.W_out / D
    return hs, pre, y


def forward(params: ResNetParams, act: ActivationSpec, x):
    """Single input: returns (hidden (L+1, D), y (d_out,))."""
    hs, _, y = forward_batch(params, act, np.asarray(x, dtype=float)[None, :])
    return np.stack([h[0] for h in hs]), y[0]


def loss_and_grad(params: ResNetParams, act: ActivationSpec, data: Dataset, clip_bound=None):
    """Squared-error loss averaged over the dataset, with exact reverse-mode gradients."""
    L, D, M = params.U.shape
    hs, pre, y = forward_batch(params, act, data.X, clip_bound)
    resid = y - data.Y
    N = data.N
    loss = 0.5 * float(np.sum(resid * resid)) / N
    dy = resid / N
    g = dy @ params.W_out.T / D
    dW_out = hs[-1].T @ dy / D
    dU = np.empty_like(params.U)
    dV = np.empty_like(params.V)
    scale = 1.0 / (M * L)
    for layer in reversed(range(L)):
        a = pre[layer]
        dV[layer] = scale * g.T @ act.rho(a)
        # g = b/D, so g V is the RMS product <V, b>
        t = _clip(g @ params.V[layer], clip_bound)
        da = scale * t * act.d1(a)
        dU[layer] = hs[layer].T @ da / D
        g = g + da @ params.U[layer].T / D
    dW_in = g.T @ data.X
    return loss, ResNetParams(dW_in, dW_out, dU, dV)


def gd_step(params: ResNetParams, grads: ResNetParams, shape: ShapeConfig, hp: HPConfig) -> ResNetParams:
    """U, V move with multiplier eta*L*M*D; embeddings stay frozen."""
    mult = shape.L * shape.M * shape.D
    return replace(
        params,
        U=params.U - hp.eta_u * mult * grads.U,
        V=params.V - hp.eta_v * mult * grads.V,
    )


def train(
    shape: ShapeConfig,
    hp: HPConfig,
    act: ActivationSpec,
    data: Dataset,
    K: int,
    record_layers: Optional[Sequence[int]] = None,
    rng: Optional[RngState] = None,
    params: Optional[ResNetParams] = None,
) -> TrainRecord:
    if K < 0:
        raise InvalidConfigError("K must be >= 0")
    if params is None:
        params = init_params(shape, hp, rng)
    layers = sorted(set(record_layers or ()) | {shape.L})
    hidden = {layer: np.empty((K + 1, data.N, shape.D)) for layer in layers}
    outputs = np.empty((K + 1, data.N, shape.d_out))
    losses = np.empty(K + 1)
    # divergence is caught by the forward pass on the next step
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K + 1):
            try:
                hs, _, y = forward_batch(params, act, data.X, hp.clip_bound)
            except NumericalOverflowError as exc:
                raise NumericalOverflowError("training diverged", step=k, **exc.context) from exc
            for layer in layers:
                hidden[layer][k] = hs[layer]
            outputs[k] = y
            losses[k] = 0.5 * float(np.sum((y - data.Y) ** 2)) / data.N
            if k == K:
                break
            _, grads = loss_and_grad(params, act, data, hp.clip_bound)
            params = gd_step(params, grads, shape, hp)
    meta = {"seed": rng.seed if rng is not None else None, "stream": rng.stream if rng is not None else None}
    return TrainRecord(shape, hidden, outputs, losses, params.W_in, params.W_out, meta)
