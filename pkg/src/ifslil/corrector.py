"""Corrector ``chi = sum_i U^i g`` and the martingale decomposition it induces.

``chi`` is estimated by coupling a chain started at ``x`` with a companion
started from a stationary draw and summing the observable differences up to a
truncation ``N`` chosen from the fitted geometric decay.  Every node uses the
same replica substreams and the same companions, so the estimate is a smooth,
deterministic function of the seed.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .coupling import DecayFit, coupled_slots, fit_decay, run_coupled_uniforms
from .model import ModelSpec, ObservableSpec, as_states
from .parallel import chunk_ranges, map_ordered
from .rng import SeededStream
from .simulator import (Trajectory, default_burn_in, iterate, stationary_samples)

DEFAULT_NODES = 65
MIN_REPLICAS = 1024
MAX_ROWS_FAST = 2 ** 22
MAX_ROWS_QUADRATURE = 2 ** 18
PILOT_REPLICAS = 256
MAX_TRUNCATION = 10_000
MEAN_SAMPLES = 2 ** 18
MEAN_SAMPLES_QUADRATURE = 2 ** 16
LOOKUP_TOL_FACTOR = 0.2
UNIFORM_BUDGET = 2 ** 21
ROW_BUDGET = 2 ** 16


@dataclass
class MeanEstimate:
    value: float
    stderr: float
    count: int

    def __float__(self) -> float:
        return self.value


def estimate_g_mean(model: ModelSpec, obs: ObservableSpec, stationary: np.ndarray) -> MeanEstimate:
    x = as_states(stationary, model.d)
    if x.shape[0] == 0:
        raise ValueError("no stationary samples")
    v = obs(x)
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("inf")
    return MeanEstimate(float(np.mean(v)), se, int(v.size))


@dataclass(eq=False)
class CorrectorEstimate:
    """Tabulated corrector.  Call it on states to get ``chi_hat``.

    ``kind`` is ``spline`` (cubic spline through nodes in one dimension, linear
    beyond the end nodes), ``lookup`` (finite state space, nearest node) or
    ``pointwise`` (fresh coupled estimate per new point, cached).
    """
    nodes: np.ndarray
    values: np.ndarray
    se: np.ndarray
    kind: str
    truncation_N: int
    tail_bound: float
    g_mean_estimate: float
    tol: float
    replicas: int
    q_hat: float
    C_hat: float
    g_mean_stderr: float = 0.0
    perturbation: Optional[Callable[[np.ndarray], np.ndarray]] = None
    _engine: Optional[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim == 1:
            self.nodes = self.nodes[:, None]
        self.values = np.asarray(self.values, dtype=float)
        self.se = np.asarray(self.se, dtype=float)
        self._spline = None
        if self.kind == "spline":
            if self.nodes.shape[1] != 1 or self.nodes.shape[0] < 2:
                raise ValueError("spline corrector needs at least two one-dimensional nodes")
            self._spline = CubicSpline(self.nodes[:, 0], self.values)
        for key, v, s in zip(map(_key, self.nodes), self.values, self.se):
            self._cache[key] = (float(v), float(s))

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    @property
    def stderr_profile(self) -> str:
        return (f"Monte Carlo standard error over {len(self.values)} nodes: max "
                f"{np.max(self.se):.3g}, median {np.median(self.se):.3g} ({self.replicas} replicas)")

    def _raw(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "spline":
            z = x[:, 0]
            lo, hi = self.nodes[0, 0], self.nodes[-1, 0]
            zc = np.clip(z, lo, hi)
            v = self._spline(zc)
            d1 = self._spline.derivative()
            v = v + np.where(z < lo, (z - lo) * d1(lo), 0.0) + np.where(z > hi, (z - hi) * d1(hi), 0.0)
            s = np.interp(zc, self.nodes[:, 0], self.se)
            return v, s
        if self.kind == "lookup":
            d2 = np.sum((x[:, None, :] - self.nodes[None, :, :]) ** 2, axis=2)
            idx = np.argmin(d2, axis=1)
            return self.values[idx], self.se[idx]
        keys = [_key(row) for row in x]
        missing = sorted({k for k in keys if k not in self._cache})
        if missing:
            if self._engine is None:
                raise KeyError("point not tabulated and no estimator attached")
            with self._lock:
                todo = [k for k in missing if k not in self._cache]
                if todo:
                    vals, ses = self._engine(np.array(todo, dtype=float))
                    for k, v, s in zip(todo, vals, ses):
                        self._cache[k] = (float(v), float(s))
        out = np.array([self._cache[k] for k in keys]).reshape(-1, 2)
        return out[:, 0], out[:, 1]

    def __call__(self, x) -> np.ndarray:
        xs = as_states(x, self.d)
        v, _ = self._raw(xs)
        if self.perturbation is not None:
            v = v + np.asarray(self.perturbation(xs), dtype=float).reshape(-1)
        return v

    def stderr(self, x) -> np.ndarray:
        return self._raw(as_states(x, self.d))[1]

    def perturbed(self, fn: Callable[[np.ndarray], np.ndarray]) -> "CorrectorEstimate":
        """Copy whose values are shifted by ``fn(x)`` (negative controls)."""
        return replace(self, perturbation=fn, _cache=dict(self._cache), _lock=threading.Lock())

    @classmethod
    def from_table(cls, nodes, values, g_mean: float = 0.0, kind: str = "lookup",
                   se=None) -> "CorrectorEstimate":
        """Wrap known corrector values, e.g. an exact solution on a finite chain."""
        values = np.asarray(values, dtype=float)
        se = np.zeros_like(values) if se is None else np.asarray(se, dtype=float)
        return cls(np.asarray(nodes, float), values, se, kind, 0, 0.0, g_mean, 0.0, 0,
                   float("nan"), float("nan"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "truncation_N": self.truncation_N, "tail_bound": self.tail_bound,
                "g_mean_estimate": self.g_mean_estimate, "tol": self.tol, "replicas": self.replicas,
                "q_hat": self.q_hat, "C_hat": self.C_hat, "stderr_profile": self.stderr_profile}

    def table_rows(self) -> list:
        return [list(n) + [v, s] for n, v, s in zip(self.nodes, self.values, self.se)]


def _key(row) -> tuple:
    return tuple(float(v) for v in np.asarray(row, dtype=float).reshape(-1))


def tail_bound(decay: DecayFit, G: float, rho_x: float, rho_bar: float, N: int) -> float:
    q = decay.q_hat
    return G * decay.C_hat * q ** (N + 1) / (1.0 - q) * (1.0 + rho_x + rho_bar)


def truncation_for(decay: DecayFit, G: float, rho_x: float, rho_bar: float, tol: float) -> int:
    if not decay.converging:
        raise ValueError(f"q_hat = {decay.q_hat:.4g} is not below 1; the series cannot be truncated")
    for N in range(MAX_TRUNCATION + 1):
        if tail_bound(decay, G, rho_x, rho_bar, N) < tol:
            return N
    raise ValueError("truncation exceeds the cap; decay too slow for the requested tolerance")


def coupled_sums(model: ModelSpec, obs: ObservableSpec, points: np.ndarray, companions: np.ndarray,
                 N: int, stream: SeededStream) -> tuple[np.ndarray, np.ndarray]:
    """Per point: mean and SE over replicas of ``sum_{i<=N} g(x_i) - g(y_i)``.

    Replica ``r`` of every point uses substream ``r`` and companion ``r``.
    """
    pts = as_states(points, model.d)
    comp = as_states(companions, model.d)
    R, k = comp.shape[0], pts.shape[0]
    slots = coupled_slots(model)
    rc = int(np.clip(UNIFORM_BUDGET // max(N * slots, 1), 256, 8192))
    group = max(1, ROW_BUDGET // rc)

    def run(rng):
        a, b = rng
        m = b - a
        u = stream.block(np.arange(a, b), 0, N * slots).reshape(N, slots, m) if N else None
        s1 = np.empty(k)
        s2 = np.empty(k)
        for p0 in range(0, k, group):
            kg = min(group, k - p0)
            x0 = np.repeat(pts[p0:p0 + kg], m, axis=0)
            y0 = np.tile(comp[a:b], (kg, 1))
            acc = obs(x0) - obs(y0)
            if N:
                for x, y, _ in run_coupled_uniforms(model, x0, y0, np.tile(u, (1, 1, kg))):
                    acc += obs(x) - obs(y)
            acc = acc.reshape(kg, m)
            s1[p0:p0 + kg] = acc.sum(axis=1)
            s2[p0:p0 + kg] = (acc * acc).sum(axis=1)
        return s1, s2

    s1 = np.zeros(k)
    s2 = np.zeros(k)
    for a1, a2 in map_ordered(run, chunk_ranges(R, rc)):
        s1 += a1
        s2 += a2
    mean = s1 / R
    var = np.maximum(s2 / R - mean ** 2, 0.0) * R / max(R - 1, 1)
    return mean, np.sqrt(var / R)


def default_nodes(model: ModelSpec, stationary: np.ndarray, count: int = DEFAULT_NODES) -> np.ndarray:
    """Spline nodes: half spread over the audit window, half over the bulk of the invariant law."""
    z = as_states(stationary, model.d)[:, 0]
    lo_w, hi_w = float(model.audit_window[0][0]), float(model.audit_window[1][0])
    q_lo, q_hi = np.quantile(z, [0.001, 0.999])
    pad = 0.25 * (q_hi - q_lo) + 1e-9
    lo, hi = min(lo_w, q_lo - pad), max(hi_w, q_hi + pad)
    wide = np.linspace(lo, hi, count // 2 + 1)
    bulk = np.linspace(q_lo - pad, q_hi + pad, count - count // 2 - 1)
    nodes = np.unique(np.concatenate([wide, bulk]))
    spacing = np.diff(nodes)
    keep = np.concatenate([[True], spacing > 1e-6 * (hi - lo)])
    return nodes[keep][:, None]


def fit_corrector(model: ModelSpec, obs: ObservableSpec, decay: Optional[DecayFit] = None,
                  tol: Optional[float] = None, stream: Optional[SeededStream] = None,
                  g_mean: Optional[float] = None, nodes: Optional[np.ndarray] = None,
                  node_count: int = DEFAULT_NODES, replicas: Optional[int] = None,
                  truncation_N: Optional[int] = None, max_rows: Optional[int] = None,
                  mean_samples: Optional[int] = None) -> CorrectorEstimate:
    """Estimate ``chi`` on a node table.

    ``g_mean`` skips the centering estimate (pass 0.0 for an observable known to
    be centered).  ``tol`` defaults to 1% of the stationary standard deviation of
    ``g``; it bounds the geometric tail and sets the replica target.
    """
    stream = stream or SeededStream(0, 0xC41)
    if decay is None:
        decay = fit_decay(model, obs, stream=stream.child("decay"))
    if not decay.converging:
        raise ValueError(f"q_hat = {decay.q_hat:.4g} is not below 1; the series cannot be truncated")
    burn = default_burn_in(decay.q_hat)
    if mean_samples is None:
        mean_samples = MEAN_SAMPLES if model.sampler is not None else MEAN_SAMPLES_QUADRATURE
    mu = stationary_samples(model, burn, mean_samples, stream=stream.child("mean"))
    mean_est = estimate_g_mean(model, obs, mu)
    m_hat = mean_est.value if g_mean is None else float(g_mean)
    sd_g = float(np.std(obs(mu), ddof=1))
    finite = model.states is not None
    if tol is None:
        # a finite chain tabulates few states, so it can afford a tighter target
        tol = (LOOKUP_TOL_FACTOR if finite else 1.0) * 0.01 * sd_g if sd_g > 0 else 1e-3
    if nodes is None:
        if finite:
            nodes = np.asarray(model.states, float).reshape(-1, model.d)
        elif model.d == 1:
            nodes = default_nodes(model, mu, node_count)
        else:
            nodes = np.empty((0, model.d))
    nodes = as_states(nodes, model.d) if len(nodes) else np.empty((0, model.d))
    kind = "lookup" if finite else ("spline" if model.d == 1 and len(nodes) >= 2 else "pointwise")

    G = obs.G
    rho_bar = float(np.mean(model.rho(mu)))
    lo, hi = model.audit_window
    rho_span = [float(np.max(model.rho(nodes)))] if len(nodes) else []
    rho_span += [float(model.rho(lo)[0]), float(model.rho(hi)[0])]
    rho_max = max(rho_span)
    N = truncation_N if truncation_N is not None else truncation_for(decay, G, rho_max, rho_bar, tol)
    coupled = stream.child("coupled")
    if max_rows is None:
        max_rows = MAX_ROWS_FAST if model.sampler is not None else MAX_ROWS_QUADRATURE
    cap = max(MIN_REPLICAS, max_rows // max(len(nodes), 1))
    if replicas is None:
        pilot_comp = stationary_samples(model, burn, PILOT_REPLICAS, stream=stream.child("pilot"))
        probe = nodes if len(nodes) <= 5 or finite else nodes[np.linspace(0, len(nodes) - 1, 5).astype(int)]
        if len(probe) == 0:
            probe = np.vstack([lo, hi])
        _, pse = coupled_sums(model, obs, probe, pilot_comp, N, stream.child("pilot-run"))
        sd = float(np.max(pse)) * math.sqrt(PILOT_REPLICAS)
        replicas = int(np.clip(math.ceil((sd / tol) ** 2), MIN_REPLICAS, cap))
    companions = stationary_samples(model, burn, replicas, stream=stream.child("companions"))

    def engine(points: np.ndarray):
        return coupled_sums(model, obs, points, companions, N, coupled)

    if len(nodes):
        values, se = engine(nodes)
    else:
        values, se = np.empty(0), np.empty(0)
    est = CorrectorEstimate(nodes, values, se, kind, int(N),
                            tail_bound(decay, G, rho_max, rho_bar, N), m_hat, float(tol),
                            int(replicas), decay.q_hat, decay.C_hat,
                            g_mean_stderr=0.0 if g_mean is not None else mean_est.stderr,
                            _engine=engine)
    return est


def estimate_chi(model: ModelSpec, obs: ObservableSpec, x, tol: Optional[float] = None,
                 stream: Optional[SeededStream] = None, decay: Optional[DecayFit] = None,
                 **kw) -> float:
    """``chi_hat`` at a single state."""
    est = fit_corrector(model, obs, decay, tol, stream, nodes=as_states(x, model.d), **kw)
    return float(est.values[0])


@dataclass
class MartingaleDecomposition:
    M: np.ndarray
    Z: np.ndarray
    base_trajectory: Trajectory

    def to_csv(self, path) -> None:
        from .io import write_csv
        write_csv(path, ["n", "M", "Z"], ([k, m, z] for k, (m, z) in enumerate(zip(self.M, self.Z))))


def martingale_decompose(traj: Trajectory, chi: CorrectorEstimate,
                         obs: ObservableSpec) -> MartingaleDecomposition:
    """``Z_n = chi(x_n) - chi(x_{n-1}) + g(x_{n-1})`` with ``g`` centered by the corrector's mean."""
    if traj.states.shape[0] < 1:
        raise ValueError("trajectory has no states")
    c = chi(traj.states)
    g = obs(traj.states) - chi.g_mean_estimate
    Z = np.zeros(c.size)
    Z[1:] = c[1:] - c[:-1] + g[:-1]
    return MartingaleDecomposition(np.cumsum(Z), Z, traj)


def increments(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate,
               x: np.ndarray, x_next: np.ndarray) -> np.ndarray:
    return chi(x_next) - chi(x) + (obs(x) - chi.g_mean_estimate)


@dataclass
class DriftResult:
    statistic: float
    estimates: np.ndarray
    stderr: np.ndarray

    @property
    def passed(self) -> bool:
        return self.statistic <= 3.0


def martingale_drift_test(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate,
                          test_points, replicas: int, stream: SeededStream) -> DriftResult:
    """Largest standardized one-step drift of ``chi(x_1) - chi(x) + g(x)``."""
    pts = as_states(test_points, model.d)

    def one(j: int):
        x = np.repeat(pts[j:j + 1], replicas, axis=0)
        _, x1, _, _ = next(iterate(model, x, stream.child(j), np.arange(replicas), 1))
        z = increments(model, obs, chi, x, x1)
        return float(np.mean(z)), float(np.std(z, ddof=1) / math.sqrt(replicas))

    res = map_ordered(one, range(pts.shape[0]))
    est = np.array([r[0] for r in res])
    se = np.array([r[1] for r in res])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(est) / se, np.where(np.abs(est) <= 1e-12, 0.0, np.inf))
    return DriftResult(float(np.max(z)) if z.size else 0.0, est, se)


@dataclass
class LipschitzCheck:
    passed: bool
    margin: float
    ratios: np.ndarray


def chi_lipschitz_check(chi: CorrectorEstimate, decay: DecayFit, obs: ObservableSpec,
                        pair_samples, model: Optional[ModelSpec] = None) -> LipschitzCheck:
    """Check ``|chi(x) - chi(y)| <= G C / (1 - q) (1 + rho(x) + rho(y))`` on pairs.

    The bound is inflated by three combined standard errors of the estimates.
    """
    pairs = list(pair_samples)
    if not pairs:
        return LipschitzCheck(True, float("inf"), np.empty(0))
    xs = np.vstack([as_states(p[0], chi.d) for p in pairs])
    ys = np.vstack([as_states(p[1], chi.d) for p in pairs])
    if model is not None:
        rx, ry = model.rho(xs), model.rho(ys)
    else:
        rx, ry = np.linalg.norm(xs, axis=1), np.linalg.norm(ys, axis=1)
    lhs = np.abs(chi(xs) - chi(ys))
    bound = obs.G * decay.C_hat / (1.0 - decay.q_hat) * (1.0 + rx + ry)
    slack = 3.0 * np.hypot(chi.stderr(xs), chi.stderr(ys)) + 1e-12 * np.maximum(1.0, bound)
    margin = bound + slack - lhs
    return LipschitzCheck(bool(np.all(margin >= 0)), float(np.min(margin)), lhs / bound)
