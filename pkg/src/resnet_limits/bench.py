"""Error functionals, shape sweeps, rate fits, Gaussianity checks and the CLT-decay probe."""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize, special, stats

from .activations import ActivationSpec, linear
from .dmft import DmftConfig, PROXY_SHAPE, dmft_run, reference_proxy
from .errors import (
    ContractViolationError,
    InvalidConfigError,
    InvalidInputError,
    ResNetLimitsError,
    UnderdeterminedFitError,
)
from .linear_limit import LinearLimitConfig, coupled_limit_hidden, limit_outputs, linear_limit_run
from .numerics import RngState, SGrid, rng_create
from .resnet import Dataset, HPConfig, ShapeConfig, TrainRecord, embedding_rows, train

COUPLED = "coupled-embeddings"
UNCOUPLED = "uncoupled"


class Target(str, enum.Enum):
    EXACT_LINEAR = "exact_linear_limit"
    PROXY = "reference_proxy"
    DMFT = "dmft"


@dataclass(frozen=True)
class ErrorRecord:
    run_id: str
    L: int
    M: int
    D: int
    P: int
    seed: int
    k: int
    delta_h: float
    delta_y: float
    wall_ms: int = 0

    def __post_init__(self):
        if not (self.delta_h >= 0 or np.isnan(self.delta_h)) or not self.delta_y >= 0:
            raise InvalidInputError("errors must be nonnegative")
        if self.P != ShapeConfig(self.L, self.M, self.D).n_params:
            raise InvalidInputError("P does not match D(d_in+d_out) + 2LMD")

    @property
    def shape(self) -> tuple:
        return (self.L, self.M, self.D)


@dataclass
class FailureRecord:
    run_id: str
    L: int
    M: int
    D: int
    seed: int
    error: str
    message: str


@dataclass
class RateFit:
    model: str  # "h_rate" or "y_rate"
    alpha: float
    beta: float
    r2: float
    n_points: int
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: Optional[float] = None  # 1/L coefficient of the three-term model

    def predict(self, L, M, D) -> np.ndarray:
        t1, t2 = _terms(self.model, np.asarray(L, float), np.asarray(M, float), np.asarray(D, float))
        sq = (self.alpha * t1) ** 2 + (self.beta * t2) ** 2
        if self.gamma is not None:
            sq = sq + (self.gamma / np.asarray(L, float)) ** 2
        return np.sqrt(sq)

    def shares(self, L, M, D):
        """Fraction of the squared model error carried by each term (t1 share, t2 share)."""
        t1, t2 = _terms(self.model, np.asarray(L, float), np.asarray(M, float), np.asarray(D, float))
        a, b = (self.alpha * t1) ** 2, (self.beta * t2) ** 2
        total = self.predict(L, M, D) ** 2
        return a / total, b / total


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    n_points: int


@dataclass
class SweepConfig:
    shapes: list  # of ShapeConfig
    seeds: list
    K: int
    act: ActivationSpec = field(default_factory=lambda: linear(1.0))
    hp: HPConfig = field(default_factory=HPConfig)
    x: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.5, -0.3]))
    y_star: np.ndarray = field(default_factory=lambda: np.array([0.5, -1.0, 0.2]))
    target: Target = Target.EXACT_LINEAR
    coupling: str = COUPLED
    all_layers: bool = False
    grid: SGrid = field(default_factory=SGrid)
    proxy_shape: ShapeConfig = PROXY_SHAPE
    dmft_P: int = 2000
    dmft_n_mc: int = 2000
    stream: str = "sweep"
    threads: int = 1
    timing: bool = False  # wall_ms stays 0 unless set, keeping outputs reproducible

    def __post_init__(self):
        self.target = Target(self.target)
        self.x = np.asarray(self.x, float).reshape(-1)
        self.y_star = np.asarray(self.y_star, float).reshape(-1)
        if self.coupling not in (COUPLED, UNCOUPLED):
            raise InvalidConfigError(f"coupling must be {COUPLED!r} or {UNCOUPLED!r}")
        if not self.shapes or not self.seeds:
            raise InvalidConfigError("sweep needs at least one shape and one seed")
        if self.K < 0:
            raise InvalidConfigError("K must be >= 0")
        self.shapes = [s if isinstance(s, ShapeConfig) else ShapeConfig(*s) for s in self.shapes]
        for s in self.shapes:
            if (s.d_in, s.d_out) != (self.x.size, self.y_star.size):
                raise InvalidConfigError("shape d_in/d_out must match x and y_star")
        if self.target is Target.EXACT_LINEAR and not self.act.is_linear:
            raise InvalidConfigError("the exact limit target needs a linear activation")
        if self.target is Target.PROXY:
            big = self.proxy_shape
            for s in self.shapes:
                if not (big.L >= s.L and big.M >= s.M and big.D >= s.D and big.L % s.L == 0):
                    raise InvalidConfigError(f"proxy shape {big} must dominate {s} (and L divisible)")
        if self.threads < 1:
            raise InvalidConfigError("threads must be >= 1")

    @property
    def data(self) -> Dataset:
        return Dataset(self.x[None, :], self.y_star[None, :])

    def to_dict(self) -> dict:
        return {
            "shapes": [[s.L, s.M, s.D] for s in self.shapes],
            "seeds": list(self.seeds),
            "K": self.K,
            "act": self.act.to_dict(),
            "hp": {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self.hp).items()},
            "x": self.x.tolist(),
            "y_star": self.y_star.tolist(),
            "target": self.target.value,
            "coupling": self.coupling,
            "all_layers": self.all_layers,
            "n_steps": self.grid.n_steps,
            "proxy_shape": [self.proxy_shape.L, self.proxy_shape.M, self.proxy_shape.D],
            "dmft_P": self.dmft_P,
            "dmft_n_mc": self.dmft_n_mc,
            "stream": self.stream,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=4).hexdigest()


@dataclass
class LimitTrajectory:
    """Limit hidden states per small-model layer, (n_k, N, D), plus the embedding key they were built for."""

    hidden: dict
    y: np.ndarray  # (n_k, d_out)
    coupled: bool
    embedding_key: Optional[str] = None


def embedding_key(W_in, W_out) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(W_in, dtype=float).tobytes())
    h.update(np.ascontiguousarray(W_out, dtype=float).tobytes())
    return h.hexdigest()


def delta_h(small: TrainRecord, limit: LimitTrajectory, k: int) -> float:
    """Max over the limit's layers and datapoints of the RMS distance at step k."""
    if not limit.coupled or small.meta.get("coupling", COUPLED) != COUPLED:
        raise ContractViolationError("delta_h needs coupled embeddings")
    if limit.embedding_key is None or limit.embedding_key != embedding_key(small.W_in, small.W_out):
        raise ContractViolationError("limit trajectories were not built from this model's embedding rows")
    worst = 0.0
    for layer, H in limit.hidden.items():
        if layer not in small.hidden:
            raise ContractViolationError(f"layer {layer} was not recorded by the finite model")
        h = small.hidden[layer][k]
        if H.shape[-1] != h.shape[-1]:
            raise ContractViolationError("mismatched D between model and limit")
        diff = h - H[k]
        worst = max(worst, float(np.max(np.sqrt(np.mean(diff * diff, axis=-1)))))
    return worst


def delta_y(small: TrainRecord, y_limit, k: int) -> float:
    """Max over datapoints of the Euclidean output distance at step k."""
    y_limit = np.asarray(y_limit, float)
    diff = small.outputs[k] - y_limit[k]
    return float(np.max(np.linalg.norm(np.atleast_2d(diff), axis=-1)))


def _layers(shape: ShapeConfig, all_layers: bool):
    return list(range(shape.L + 1)) if all_layers else [shape.L]


def linear_target(cfg: SweepConfig):
    return linear_limit_run(LinearLimitConfig(cfg.act.a, cfg.x, cfg.y_star, cfg.K + 1, hp=cfg.hp, grid=cfg.grid))


def dmft_target(cfg: SweepConfig, rng: RngState):
    dcfg = DmftConfig(cfg.x, cfg.y_star, cfg.K + 1, cfg.act, hp=cfg.hp, grid=cfg.grid, P=cfg.dmft_P, n_mc=cfg.dmft_n_mc)
    ens, _ = dmft_run(dcfg, rng)
    return ens


def limit_for(cfg: SweepConfig, shared, shape: ShapeConfig, rec: TrainRecord, rng: RngState) -> LimitTrajectory:
    """Coupled limit trajectories for one small model."""
    layers = _layers(shape, cfg.all_layers)
    W_in, W_out = rec.W_in, rec.W_out
    key = embedding_key(W_in, W_out)
    if cfg.target is Target.PROXY:
        big = cfg.proxy_shape
        ratio = big.L // shape.L
        prox = reference_proxy(big, cfg.hp, cfg.act, cfg.data, cfg.K, rng.child("proxy"), embed_rng=rng,
                               record_layers=[ratio * l for l in layers])
        hidden = {l: prox.hidden[ratio * l][:, :, : shape.D] for l in layers}
        prefix = embedding_key(prox.W_in[: shape.D], prox.W_out[: shape.D])
        return LimitTrajectory(hidden, prox.outputs[:, 0], coupled=prefix == key, embedding_key=prefix)
    hidden = {}
    for l in layers:
        s_index = cfg.grid.index_of(l / shape.L)
        if cfg.target is Target.EXACT_LINEAR:
            H = coupled_limit_hidden(shared, W_in, W_out, s_index)
        else:
            H = shared.coupled_hidden(W_in, W_out, s_index)
        hidden[l] = H[:, None, :]
    y = limit_outputs(shared) if cfg.target is Target.EXACT_LINEAR else np.array(shared.y)
    return LimitTrajectory(hidden, y, coupled=True, embedding_key=key)


def run_id_for(cfg: SweepConfig, shape: ShapeConfig, seed: int) -> str:
    return f"{cfg.config_hash()}-L{shape.L}M{shape.M}D{shape.D}-s{seed}"


def _one_run(cfg: SweepConfig, shared, shape: ShapeConfig, seed: int):
    run_id = run_id_for(cfg, shape, seed)
    t0 = time.perf_counter()
    rng = rng_create(seed, cfg.stream)
    try:
        layers = _layers(shape, cfg.all_layers)
        if cfg.coupling == COUPLED:
            rec = train(shape, cfg.hp, cfg.act, cfg.data, cfg.K, record_layers=layers, rng=rng)
            rec.meta["coupling"] = COUPLED
            lim = limit_for(cfg, shared, shape, rec, rng)
            dh = [delta_h(rec, lim, k) for k in range(cfg.K + 1)]
        else:
            # fresh embedding stream: only output errors are meaningful
            rec = train(shape, cfg.hp, cfg.act, cfg.data, cfg.K, record_layers=layers, rng=rng.child("uncoupled"))
            rec.meta["coupling"] = UNCOUPLED
            if cfg.target is Target.PROXY:
                lim = limit_for(cfg, shared, shape, rec, rng)
                y_lim = lim.y
            else:
                y_lim = limit_outputs(shared) if cfg.target is Target.EXACT_LINEAR else np.array(shared.y)
            dh = [float("nan")] * (cfg.K + 1)
        if cfg.coupling == COUPLED:
            y_lim = lim.y
        wall = int(round(1000 * (time.perf_counter() - t0))) if cfg.timing else 0
        out = [
            ErrorRecord(run_id, shape.L, shape.M, shape.D, shape.n_params, seed, k, dh[k], delta_y(rec, y_lim, k), wall)
            for k in range(cfg.K + 1)
        ]
        return out, None
    except ResNetLimitsError as exc:
        return [], FailureRecord(run_id, shape.L, shape.M, shape.D, seed, type(exc).__name__, str(exc))


@dataclass
class SweepResult:
    records: list
    failures: list
    config: dict

    def averages(self, k: Optional[int] = None):
        return seed_average(self.records, k)


def run_sweep(cfg: SweepConfig, threads: Optional[int] = None) -> SweepResult:
    """Every (shape, seed) run; failures are recorded and the sweep continues.

    Runs are scheduled on a thread pool but collected in fixed (shape, seed)
    order, so the output does not depend on the thread count.
    """
    if cfg.target is Target.EXACT_LINEAR:
        shared = linear_target(cfg)
    elif cfg.target is Target.DMFT:
        shared = dmft_target(cfg, rng_create(min(cfg.seeds), cfg.stream + ".dmft"))
    else:
        shared = None
    jobs = [(shape, seed) for shape in cfg.shapes for seed in cfg.seeds]
    n_threads = threads or cfg.threads
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda j: _one_run(cfg, shared, *j), jobs))
    else:
        results = [_one_run(cfg, shared, *j) for j in jobs]
    records = [r for recs, _ in results for r in recs]
    failures = [f for _, f in results if f is not None]
    return SweepResult(records, failures, cfg.to_dict())


@dataclass
class AveragedPoint:
    L: int
    M: int
    D: int
    k: int
    delta_h: float
    delta_y: float
    n_seeds: int

    @property
    def P(self) -> int:
        return ShapeConfig(self.L, self.M, self.D).n_params


def seed_average(records: Sequence[ErrorRecord], k: Optional[int] = None) -> list:
    """Mean over seeds per (shape, k), in order of first appearance."""
    groups: dict = {}
    for r in records:
        if k is not None and r.k != k:
            continue
        groups.setdefault((r.L, r.M, r.D, r.k), []).append(r)
    out = []
    for (L, M, D, kk), rs in groups.items():
        out.append(AveragedPoint(L, M, D, kk, float(np.mean([r.delta_h for r in rs])),
                                 float(np.mean([r.delta_y for r in rs])), len(rs)))
    return out


def _terms(model: str, L, M, D):
    if model == "h_rate":
        return np.sqrt(D / (M * L)), 1.0 / np.sqrt(D)
    if model == "y_rate":
        return D / (M * L), 1.0 / np.sqrt(D)
    raise InvalidInputError(f"unknown rate model {model!r}")


def _points(records, model: str, k: Optional[int]):
    pts = records
    if pts and isinstance(pts[0], ErrorRecord):
        if k is None:
            k = max(r.k for r in pts)
        pts = seed_average(pts, k)
    key = "delta_h" if model == "h_rate" else "delta_y"
    L = np.array([p.L for p in pts], float)
    M = np.array([p.M for p in pts], float)
    D = np.array([p.D for p in pts], float)
    err = np.array([getattr(p, key) for p in pts], float)
    return L, M, D, err


def fit_two_term(t1, t2, err, extra=None) -> tuple:
    """Least squares of log err against 0.5 log(A t1^2 + B t2^2 [+ C extra^2]), A, B, C >= 0.

    Returns ((alpha, beta[, gamma]), log residuals).
    """
    t1, t2, err = (np.asarray(v, float) for v in (t1, t2, err))
    if np.any(err <= 0) or not np.all(np.isfinite(err)):
        raise InvalidInputError("errors must be positive and finite")
    cols = [t1**2, t2**2] + ([np.asarray(extra, float) ** 2] if extra is not None else [])
    X = np.stack(cols, axis=1)
    Xn = X / np.linalg.norm(X, axis=0)
    if np.linalg.matrix_rank(Xn, tol=1e-8) < X.shape[1]:
        raise UnderdeterminedFitError("the shapes do not separate the error terms")
    # linear fit on squared errors for a starting point
    start = np.maximum(np.linalg.lstsq(X, err**2, rcond=None)[0], 1e-12 * np.max(err**2) / np.max(X, axis=0))
    scale = start.copy()
    log_err = np.log(err)

    def resid(c):
        return 0.5 * np.log(X @ (c * scale)) - log_err

    sol = optimize.least_squares(resid, np.ones_like(start), bounds=(0, np.inf), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    coef = np.sqrt(sol.x * scale)
    return tuple(coef), resid(sol.x)


def fit_rate(records, model: str = "h_rate", k: Optional[int] = None, three_term: bool = False) -> RateFit:
    """Fit err ~ ||[alpha t1, beta t2]|| on seed-averaged errors, in log space."""
    L, M, D, err = _points(records, model, k)
    shapes = set(zip(L, M, D))
    if len(shapes) < 4:
        raise UnderdeterminedFitError(f"need >= 4 distinct shapes, got {len(shapes)}")
    t1, t2 = _terms(model, L, M, D)
    coef, res = fit_two_term(t1, t2, err, extra=1.0 / L if three_term else None)
    log_err = np.log(err)
    ss_tot = float(np.sum((log_err - log_err.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res**2)) / ss_tot if ss_tot > 0 else 1.0
    gamma = coef[2] if three_term else None
    return RateFit(model, float(coef[0]), float(coef[1]), r2, len(err), res, gamma)


def powerlaw_slope(x, y) -> SlopeFit:
    """OLS of log y on log x."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size != y.size:
        raise InvalidInputError("x and y differ in length")
    if x.size < 4:
        raise InvalidInputError("need >= 4 points for a slope")
    if np.any(x <= 0) or np.any(y <= 0):
        raise InvalidInputError("log-log slope needs positive values")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    n = lx.size
    res = ly - A @ np.array([slope, icpt])
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    se = float(np.sqrt(np.sum(res**2) / (n - 2) / sxx)) if n > 2 and sxx > 0 else float("nan")
    return SlopeFit(float(slope), se, float(icpt), n)


def loglog_slope(records, x_axis: str, filter: Optional[Callable] = None, k: Optional[int] = None,
                 error: str = "delta_h") -> SlopeFit:
    """Slope of seed-averaged error against one of D, M, ML, P."""
    if records and isinstance(records[0], ErrorRecord):
        if k is None:
            k = max(r.k for r in records)
        records = seed_average(records, k)
    pts = [p for p in records if filter is None or filter(p)]
    axes = {"D": lambda p: p.D, "M": lambda p: p.M, "ML": lambda p: p.M * p.L, "P": lambda p: p.P}
    if x_axis not in axes:
        raise InvalidInputError(f"x_axis must be one of {sorted(axes)}")
    return powerlaw_slope([axes[x_axis](p) for p in pts], [getattr(p, error) for p in pts])


def regime_filter(fit: RateFit, term: str, share: float = 0.5) -> Callable:
    """Predicate keeping shapes whose squared error is mostly the given term ("t1" or "t2")."""
    idx = {"t1": 0, "t2": 1}[term]
    return lambda p: fit.shares(p.L, p.M, p.D)[idx] >= share


@dataclass
class HistogramKs:
    bin_edges: np.ndarray
    counts: np.ndarray
    pdf_limit: np.ndarray  # N(0, var) density averaged over each bin
    ks_stat: float
    p_value: float


def histogram_ks(coords, var_limit: float, bins: int = 30) -> HistogramKs:
    """Histogram of coordinates plus a one-sample KS test against N(0, var_limit)."""
    coords = np.asarray(coords, float).reshape(-1)
    if coords.size < 50:
        raise InvalidInputError("histogram_ks needs at least 50 coordinates")
    if not var_limit > 0:
        raise InvalidInputError("var_limit must be > 0")
    sd = float(np.sqrt(var_limit))
    counts, edges = np.histogram(coords, bins=bins)
    cdf = stats.norm.cdf(edges, scale=sd)
    pdf = np.diff(cdf) / np.diff(edges)
    res = stats.kstest(coords, "norm", args=(0.0, sd), method="asymp")
    return HistogramKs(edges, counts, pdf, float(res.statistic), float(res.pvalue))


# ---------------------------------------------------------------- CLT probe

CLT_FUNCTIONS = ("tanh", "gauss", "cubic_ratio", "linear", "quadratic")


def clt_function(f_id: str, v: np.ndarray, A: Optional[np.ndarray] = None) -> Callable:
    """Test functions on R^m; rows of the input are points."""
    if f_id == "tanh":
        return lambda x: np.tanh(x @ v)
    if f_id == "gauss":
        return lambda x: np.exp(-0.5 * np.sum(x * x, axis=-1))
    if f_id == "cubic_ratio":
        return lambda x: (x @ v) ** 3 / (1.0 + (x @ v) ** 2)
    if f_id == "linear":
        return lambda x: x @ v
    if f_id == "quadratic":
        A = np.outer(v, v) if A is None else A
        return lambda x: np.einsum("ni,ij,nj->n", x, A, x)
    raise InvalidInputError(f"unknown test function {f_id!r}")


@dataclass
class CltGap:
    f_id: str
    n: int
    gap: float
    stderr: float


@dataclass
class CltProbe:
    """S_n = n^{-1/2} sum_i Y_i v_i against Z ~ N(0, Sigma_n^S).

    The n directions cycle through ``directions`` (G rows), so the sum over
    each group of n/G i.i.d. Y's is drawn exactly from its law (Gamma for
    centered exponential Y). S_n and Z are built from the same uniforms
    through their quantile functions; this coupling leaves both expectations
    unchanged and shrinks the variance of the estimated gap by orders of
    magnitude.
    """

    n_values: list
    f_id: str = "tanh"
    directions: Optional[np.ndarray] = None
    y_dist: str = "exponential"
    n_mc: int = 10**6
    v: Optional[np.ndarray] = None
    chunk: int = 250_000

    def __post_init__(self):
        if self.directions is None:
            self.directions = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.6, 0.52915026]])
        self.directions = np.asarray(self.directions, float)
        if self.v is None:
            self.v = np.full(self.directions.shape[1], 0.8)
        self.v = np.asarray(self.v, float)
        G = self.directions.shape[0]
        if any(int(n) % G for n in self.n_values):
            raise InvalidConfigError(f"every n must be a multiple of the {G} direction groups")
        if self.y_dist not in ("exponential", "gaussian"):
            raise InvalidConfigError("y_dist must be 'exponential' or 'gaussian'")
        if self.f_id not in CLT_FUNCTIONS:
            raise InvalidConfigError(f"f_id must be one of {CLT_FUNCTIONS}")

    @property
    def sigma(self) -> np.ndarray:
        U = self.directions
        return U.T @ U / U.shape[0]


def _group_sum_quantile(u, m: int, y_dist: str):
    """Quantile of sum_{i<=m} Y_i, centered, at probabilities u."""
    if y_dist == "exponential":
        return special.gammaincinv(float(m), u) - m
    return np.sqrt(m) * special.ndtri(u)


def clt_empirical_gap(probe: CltProbe, rng: RngState, threads: int = 1) -> list:
    """Estimated |E f(S_n) - E f(Z)| with its Monte-Carlo standard error, per n.

    Each n has its own random stream, so the result does not depend on ``threads``.
    """
    ns = [int(n) for n in probe.n_values]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda n: _clt_gap_one(probe, rng, n), ns))
    return [_clt_gap_one(probe, rng, n) for n in ns]


def _clt_gap_one(probe: CltProbe, rng: RngState, n: int) -> CltGap:
    U = probe.directions
    G = U.shape[0]
    f = clt_function(probe.f_id, probe.v)
    m = n // G
    gen = rng.child(f"n{n}").generator()
    total, total_sq, count = 0.0, 0.0, 0
    remaining = probe.n_mc
    while remaining > 0:
        c = min(probe.chunk, remaining)
        u = gen.random((c, G))
        u = np.clip(u, 1e-300, None)
        sums = _group_sum_quantile(u, m, probe.y_dist) / np.sqrt(n)
        normals = special.ndtri(u) * np.sqrt(m / n)
        diff = f(sums @ U) - f(normals @ U)
        total += float(diff.sum())
        total_sq += float((diff * diff).sum())
        count += c
        remaining -= c
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return CltGap(probe.f_id, n, abs(mean), float(np.sqrt(var / count)))


# ---------------------------------------------------------------- CSV I/O

ERRORS_COLUMNS = ["run_id", "L", "M", "D", "P", "seed", "k", "delta_h", "delta_y", "wall_ms"]
FITS_COLUMNS = ["model", "alpha", "beta", "r2", "n_points"]
HIST_COLUMNS = ["layer", "k", "bin_lo", "bin_hi", "count", "pdf_limit"]
CLT_COLUMNS = ["f_id", "n", "gap", "stderr"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def emit_errors_csv(records: Sequence[ErrorRecord], path):
    _write(path, ERRORS_COLUMNS, ([getattr(r, c) for c in ERRORS_COLUMNS] for r in records))


def emit_fits_csv(fits: Sequence[RateFit], path):
    _write(path, FITS_COLUMNS, ([f.model, f.alpha, f.beta, f.r2, f.n_points] for f in fits))


def emit_hist_csv(hists: Sequence[tuple], path):
    """``hists`` holds (layer, k, HistogramKs) triples."""
    rows = []
    for layer, k, h in hists:
        for i, cnt in enumerate(h.counts):
            rows.append([layer, k, h.bin_edges[i], h.bin_edges[i + 1], int(cnt), h.pdf_limit[i]])
    _write(path, HIST_COLUMNS, rows)


def emit_clt_csv(gaps: Sequence[CltGap], path):
    _write(path, CLT_COLUMNS, ([g.f_id, g.n, g.gap, g.stderr] for g in gaps))


def emit_csv(items, path):
    """Dispatch on item type; an empty list writes an errors.csv header."""
    items = list(items)
    if not items or isinstance(items[0], ErrorRecord):
        return emit_errors_csv(items, path)
    if isinstance(items[0], RateFit):
        return emit_fits_csv(items, path)
    if isinstance(items[0], CltGap):
        return emit_clt_csv(items, path)
    if isinstance(items[0], tuple):
        return emit_hist_csv(items, path)
    raise InvalidInputError(f"cannot emit items of type {type(items[0]).__name__}")


def read_errors_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ERRORS_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(ErrorRecord(
                row["run_id"], int(row["L"]), int(row["M"]), int(row["D"]), int(row["P"]), int(row["seed"]),
                int(row["k"]), float(row["delta_h"]), float(row["delta_y"]), int(row["wall_ms"]),
            ))
        return out


def read_fits_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [RateFit(r["model"], float(r["alpha"]), float(r["beta"]), float(r["r2"]), int(r["n_points"]))
                for r in csv.DictReader(fh)]


def read_clt_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CltGap(r["f_id"], int(r["n"]), float(r["gap"]), float(r["stderr"])) for r in csv.DictReader(fh)]
