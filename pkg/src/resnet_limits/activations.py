"""Activation functions with their first three derivatives."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidConfigError


@dataclass(frozen=True)
class ActivationSpec:
    kind: str
    rho: Callable
    d1: Callable
    d2: Callable
    d3: Callable
    # bound on |rho'|, |rho''|, |rho'''|
    c_rho: float
    a: float = field(default=float("nan"))

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def to_dict(self):
        d = {"kind": self.kind}
        if self.is_linear:
            d["a"] = self.a
        return d


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _tanh_d3(x):
    t = np.tanh(x)
    return -2.0 * (1.0 - t * t) * (1.0 - 3.0 * t * t)


def tanh() -> ActivationSpec:
    return ActivationSpec("tanh", np.tanh, _tanh_d1, _tanh_d2, _tanh_d3, c_rho=2.0)


def linear(a: float = 1.0) -> ActivationSpec:
    a = float(a)
    return ActivationSpec(
        "linear",
        lambda x: a * np.asarray(x, dtype=float),
        lambda x: np.full(np.shape(x), a),
        lambda x: np.zeros(np.shape(x)),
        lambda x: np.zeros(np.shape(x)),
        c_rho=abs(a),
        a=a,
    )


def custom(rho, d1, d2, d3, c_rho: float, name: str = "smooth-custom") -> ActivationSpec:
    return ActivationSpec(name, rho, d1, d2, d3, c_rho=float(c_rho))


def from_config(cfg) -> ActivationSpec:
    """Build from ``"tanh"``, ``{"kind": "linear", "a": 0.7}`` and the like."""
    if isinstance(cfg, ActivationSpec):
        return cfg
    if isinstance(cfg, str):
        cfg = {"kind": cfg}
    kind = cfg.get("kind")
    if kind == "tanh":
        return tanh()
    if kind == "linear":
        return linear(cfg.get("a", 1.0))
    raise InvalidConfigError(f"unknown activation kind {kind!r}")
