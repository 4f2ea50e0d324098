"""Model family for stochastically perturbed iterated function systems.

A model is the data ``(S, p, lambda, T, noise, delta)``: from state ``x`` a time
``t`` is drawn with density ``p(x, .)`` on ``[0, T]``, the map ``S(x, t)`` is
applied and a bounded noise vector ``h`` is added.

All user callables are vectorized: states are ``(m, d)`` arrays, times are
``(m,)`` arrays, and scalar-valued functions return ``(m,)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

MapFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
ScalarFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

NOISE_LAWS = ("uniform-ball", "truncated-gaussian", "point-mass-zero")


class DomainError(ValueError):
    """Argument outside the domain of a model function."""


class ModelDefinitionError(ValueError):
    """A user-supplied model function violated its contract."""


def as_states(x, d: int) -> np.ndarray:
    """Coerce a state or batch of states to shape ``(m, d)``."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, d) if a.size == d else a.reshape(-1, 1)
    if a.ndim != 2 or a.shape[1] != d:
        raise ValueError(f"expected states of dimension {d}, got shape {np.shape(x)}")
    return a


def distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(x, float) - np.asarray(y, float), axis=-1)


@dataclass(frozen=True)
class NoiseSpec:
    epsilon: float = 0.0
    law: str = "point-mass-zero"
    scale: float = 1.0  # std of the untruncated gaussian

    def __post_init__(self) -> None:
        if self.law not in NOISE_LAWS:
            raise ValueError(f"unknown noise law {self.law!r}")
        if self.epsilon < 0:
            raise ValueError("noise radius must be non-negative")

    def slots(self, d: int) -> int:
        """Uniform draws consumed per noise sample."""
        if self.law == "point-mass-zero":
            return 0
        return 1 if d == 1 else d + 1

    def sample(self, u: np.ndarray, d: int) -> np.ndarray:
        """Map uniforms of shape ``(m, slots)`` to noise vectors ``(m, d)``."""
        m = u.shape[0]
        eps = self.epsilon
        if self.law == "point-mass-zero" or eps == 0.0:
            return np.zeros((m, d))
        if d == 1:
            if self.law == "uniform-ball":
                h = eps * (2.0 * u[:, 0] - 1.0)
            else:
                lo = special.ndtr(-eps / self.scale)
                h = self.scale * special.ndtri(lo + u[:, 0] * (1.0 - 2.0 * lo))
                h = np.clip(h, -eps, eps)
            return h[:, None]
        z = special.ndtri(np.clip(u[:, :d], 1e-300, 1.0 - 1e-16))
        direction = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-300)
        if self.law == "uniform-ball":
            r = eps * u[:, d] ** (1.0 / d)
        else:
            top = stats.chi.cdf(eps / self.scale, d)
            r = self.scale * stats.chi.ppf(u[:, d] * top, d)
        h = direction * r[:, None]
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        return h * np.minimum(1.0, eps / np.maximum(norm, 1e-300))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    dimension: int
    T: float
    epsilon_star: float
    noise: NoiseSpec
    map_S: MapFn
    density_p: ScalarFn
    lipschitz_lambda: ScalarFn
    delta: float = 0.5
    base_point: Optional[np.ndarray] = None
    dini_modulus: Optional[Callable[[np.ndarray], np.ndarray]] = None
    audit_window: tuple = ((-1.0,), (1.0,))
    density_free_of_x: bool = False
    sampler: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    contains: Optional[Callable[[np.ndarray], np.ndarray]] = None
    states: Optional[np.ndarray] = None
    audit_required: bool = True
    description: str = ""
    analytic: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.noise.epsilon > self.epsilon_star:
            raise ValueError("noise radius exceeds epsilon_star")
        bp = np.zeros(self.dimension) if self.base_point is None else np.asarray(self.base_point, float)
        object.__setattr__(self, "base_point", bp.reshape(self.dimension))
        lo, hi = (np.asarray(w, float).reshape(self.dimension) for w in self.audit_window)
        object.__setattr__(self, "audit_window", (lo, hi))

    @property
    def d(self) -> int:
        return self.dimension

    def with_noise(self, epsilon: float, law: Optional[str] = None) -> "ModelSpec":
        noise = NoiseSpec(epsilon, law or (self.noise.law if epsilon > 0 else "point-mass-zero"),
                          self.noise.scale)
        if noise.law == "point-mass-zero" and epsilon > 0:
            noise = NoiseSpec(epsilon, "uniform-ball", self.noise.scale)
        return replace(self, noise=noise, epsilon_star=max(self.epsilon_star, epsilon))

    def rho(self, x: np.ndarray) -> np.ndarray:
        """Distance to the base point."""
        return distance(as_states(x, self.d), self.base_point)


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    g: Callable[[np.ndarray], np.ndarray]
    lipschitz_constant: float
    sup_bound: float
    name: str = "g"
    shift: float = 0.0

    def __post_init__(self) -> None:
        if not self.lipschitz_constant > 0 or not self.sup_bound > 0:
            raise ValueError("Lipschitz constant and sup bound must be positive")

    @property
    def G(self) -> float:
        return max(self.lipschitz_constant, self.sup_bound)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        v = np.asarray(self.g(x), dtype=float)
        return v - self.shift if self.shift else v

    def centered(self, mean: float) -> "ObservableSpec":
        """The observable minus ``mean`` (shifts accumulate)."""
        return replace(self, shift=self.shift + float(mean),
                       sup_bound=self.sup_bound + abs(float(mean)))


def _check_t(model: ModelSpec, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > model.T):
        raise DomainError(f"t must lie in [0, {model.T}]")
    return t


def _broadcast(model: ModelSpec, x, t) -> tuple[np.ndarray, np.ndarray, bool]:
    scalar = np.ndim(t) == 0 and np.asarray(x).size == model.d
    xs = as_states(x, model.d)
    ts = _check_t(model, t)
    if xs.shape[0] == 1 and ts.size > 1:
        xs = np.repeat(xs, ts.size, axis=0)
    elif ts.size == 1 and xs.shape[0] > 1:
        ts = np.repeat(ts, xs.shape[0])
    return xs, ts, scalar


def evaluate_S(model: ModelSpec, x, t) -> np.ndarray:
    xs, ts, scalar = _broadcast(model, x, t)
    out = np.asarray(model.map_S(xs, ts), dtype=float).reshape(xs.shape)
    return out[0] if scalar else out


def evaluate_p(model: ModelSpec, x, t):
    xs, ts, scalar = _broadcast(model, x, t)
    out = np.asarray(model.density_p(xs, ts), dtype=float).reshape(ts.shape)
    if np.any(out < 0) or np.any(~np.isfinite(out)):
        raise ModelDefinitionError(f"density of model {model.name!r} is negative or non-finite")
    return float(out[0]) if scalar else out


def evaluate_lambda(model: ModelSpec, x, t):
    xs, ts, scalar = _broadcast(model, x, t)
    out = np.asarray(model.lipschitz_lambda(xs, ts), dtype=float).reshape(ts.shape)
    if np.any(out < 0):
        raise ModelDefinitionError(f"lambda of model {model.name!r} is negative")
    return float(out[0]) if scalar else out


def evaluate_g(obs: ObservableSpec, x, d: int = 1):
    scalar = np.asarray(x).size == d
    out = obs(as_states(x, d))
    return float(out[0]) if scalar else out
