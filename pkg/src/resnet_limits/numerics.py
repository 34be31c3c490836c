"""Shared numerical plumbing: seeded streams, samplers, norms, RK4, finite differences."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericalOverflowError

DEFAULT_N_STEPS = 200


@dataclass(frozen=True)
class RngState:
    """A (seed, stream label) pair naming one reproducible random stream.

    Streams are derived by hashing the label into the Philox key, so two
    labels never share state and the result does not depend on call order
    or on how work is scheduled across threads.
    """

    seed: int
    stream: str = ""

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def child(self, label) -> "RngState":
        name = f"{self.stream}.{label}" if self.stream else str(label)
        return RngState(self.seed, name)

    def generator(self) -> np.random.Generator:
        digest = hashlib.blake2b(self.stream.encode("utf-8"), digest_size=16).digest()
        words = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=words)
        return np.random.Generator(np.random.Philox(seq))


def rng_create(seed: int, stream: str) -> RngState:
    return RngState(int(seed), stream)


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class DistKind:
    kind: Family = Family.GAUSSIAN
    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Family(self.kind))
        if not self.variance >= 0:
            raise InvalidConfigError(f"variance must be >= 0, got {self.variance}")


def sample_centered(rng, dist: DistKind, n) -> np.ndarray:
    """I.i.d. centered samples with variance ``dist.variance``.

    ``rng`` is an RngState (sampled from the start of its stream) or an
    already-advancing ``np.random.Generator``. ``n`` may be an int or a shape.
    """
    if dist.variance < 0:
        raise InvalidConfigError("negative variance")
    gen = rng.generator() if isinstance(rng, RngState) else rng
    sigma = np.sqrt(dist.variance)
    if dist.kind is Family.GAUSSIAN:
        out = gen.standard_normal(n)
    else:
        half_width = np.sqrt(3.0)
        out = gen.uniform(-half_width, half_width, n)
    return sigma * out


@dataclass(frozen=True)
class SGrid:
    n_steps: int = DEFAULT_N_STEPS

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidConfigError("n_steps must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) / self.n_steps

    @property
    def ds(self) -> float:
        return 1.0 / self.n_steps

    def index_of(self, s: float) -> int:
        j = s * self.n_steps
        if abs(j - round(j)) > 1e-9:
            raise InvalidInputError(f"s={s} is not a grid point of {self}")
        return int(round(j))


def rms_norm(v) -> float:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise InvalidInputError("rms_norm of an empty vector")
    return float(np.sqrt(np.mean(v * v)))


def _check_finite(y, s):
    if not np.all(np.isfinite(y)):
        raise NumericalOverflowError("non-finite value in RK4 step", s=s, norm=float(np.linalg.norm(np.nan_to_num(y))))


def rk4_step(f: Callable, y, s: float, ds: float) -> np.ndarray:
    """One classical Runge-Kutta step of dy/ds = f(s, y)."""
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(s, y))
    k2 = np.asarray(f(s + ds / 2, y + ds / 2 * k1))
    k3 = np.asarray(f(s + ds / 2, y + ds / 2 * k2))
    k4 = np.asarray(f(s + ds, y + ds * k3))
    out = y + ds / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    _check_finite(out, s)
    return out


def rk4_integrate(f: Callable, y0, s0: float, s1: float, n_steps: int) -> np.ndarray:
    """Integrate from s0 to s1 (s1 < s0 integrates backward); returns all n_steps+1 states."""
    ds = (s1 - s0) / n_steps
    y = np.asarray(y0, dtype=float)
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    for j in range(n_steps):
        y = rk4_step(f, y, s0 + j * ds, ds)
        out[j + 1] = y
    return out


def hermite_midpoint(y0, y1, dy0, dy1, h):
    """Cubic Hermite value halfway through a step of length h (O(h^4) accurate)."""
    return 0.5 * (y0 + y1) + 0.125 * h * (dy0 - dy1)


def finite_diff_gradient(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise InvalidInputError("h must be positive")
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def psd_sqrt(cov, tol_rel: float = 1e-6) -> np.ndarray:
    """Symmetric square root of a (nearly) PSD matrix, clamping small negative eigenvalues.

    Works on stacks of matrices (``cov[..., n, n]``). Eigenvalues below
    ``-tol_rel * trace`` raise IllConditionedCovarianceError.
    """
    from .errors import IllConditionedCovarianceError

    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, q = np.linalg.eigh(sym)
    trace = np.trace(sym, axis1=-2, axis2=-1)
    floor = -tol_rel * np.maximum(np.abs(trace), 1e-300)
    if np.any(w.min(axis=-1) < floor):
        raise IllConditionedCovarianceError(f"covariance has eigenvalue {w.min():.3e} below tolerance")
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)[..., None, :]) @ np.swapaxes(q, -1, -2)
