"""Finite-state reference chains solved by dense linear algebra.

A kernel is either written by hand or obtained by discretizing a
one-dimensional model on a grid.  Stationary law, corrector and asymptotic
variance are then exact up to floating point, and the kernel can be embedded
back as a model so the Monte Carlo code runs against known answers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .model import ModelSpec, NoiseSpec, ObservableSpec, as_states
from .quadrature import rule_with_nodes

ROW_TOL = 1e-12
DEFECT_TOL = 1e-3
NULL_TOL = 1e-10


class GridTooCoarseError(ValueError):
    pass


class ReducibleKernelError(ValueError):
    pass


@dataclass
class DiscreteKernel:
    states: np.ndarray
    matrix: np.ndarray
    weights: Optional[np.ndarray] = None
    defect: float = 0.0

    def __post_init__(self) -> None:
        P = np.asarray(self.matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("kernel matrix must be square")
        if np.any(P < 0):
            raise ValueError("kernel has negative entries")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("kernel rows must sum to 1")
        self.matrix = P
        st = np.arange(P.shape[0], dtype=float) if self.states is None else np.asarray(self.states, float)
        self.states = st.reshape(P.shape[0], -1)
        if self.states.shape[1] == 1:
            self._order = np.argsort(self.states[:, 0], kind="stable")
            z = self.states[self._order, 0]
            self._mids = 0.5 * (z[1:] + z[:-1])

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def index(self, x) -> np.ndarray:
        """Nearest-state index of each row of ``x``."""
        xs = as_states(x, self.states.shape[1])
        if xs.shape[1] == 1:
            return self._order[np.searchsorted(self._mids, xs[:, 0], side="left")]
        d2 = np.sum((xs[:, None, :] - self.states[None, :, :]) ** 2, axis=2)
        return np.argmin(d2, axis=1)


def load_kernel_csv(path, states=None) -> DiscreteKernel:
    P = np.loadtxt(path, delimiter=",", ndmin=2)
    return DiscreteKernel(states, P)


def _noise_cdf(noise: NoiseSpec, z: np.ndarray) -> np.ndarray:
    eps = noise.epsilon
    if noise.law == "point-mass-zero" or eps == 0.0:
        return (z >= 0).astype(float)
    if noise.law == "uniform-ball":
        return np.clip((z + eps) / (2.0 * eps), 0.0, 1.0)
    lo = special.ndtr(-eps / noise.scale)
    return np.clip((special.ndtr(z / noise.scale) - lo) / (1.0 - 2.0 * lo), 0.0, 1.0)


def discretize(model: ModelSpec, grid=None, points: int = 200, t_nodes: int = 256) -> DiscreteKernel:
    """Finite kernel on a one-dimensional grid.

    Row ``i`` integrates ``p(x_i, t)`` against the noise mass that
    ``S(x_i, t) + h`` puts in each grid cell.  Cells split at midpoints and the
    outer cells are unbounded, so every image goes to its nearest grid point.
    The quadrature error of the row mass is the defect; rows are renormalized
    afterwards.
    """
    if model.d != 1:
        raise ValueError("discretization is implemented for one-dimensional models")
    if grid is None:
        grid = np.linspace(model.audit_window[0][0], model.audit_window[1][0], points)
    x = np.sort(np.asarray(grid, dtype=float).reshape(-1))
    if x.size < 2:
        raise ValueError("grid needs at least two points")
    mid = 0.5 * (x[1:] + x[:-1])
    edges = np.concatenate([[-np.inf], mid, [np.inf]])
    rule = rule_with_nodes(model.T, t_nodes)
    t, w = rule.nodes_weights()
    k = x.size
    P = np.empty((k, k))
    point_mass = model.noise.law == "point-mass-zero" or model.noise.epsilon == 0.0
    for i in range(k):
        xi = np.full((t.size, 1), x[i])
        img = np.asarray(model.map_S(xi, t), dtype=float).reshape(-1)
        pw = np.asarray(model.density_p(xi, t), dtype=float) * w
        if point_mass:
            cell = np.searchsorted(edges, img, side="right") - 1
            inside = (cell >= 0) & (cell < k)
            P[i] = np.bincount(cell[inside], weights=pw[inside], minlength=k)
        else:
            with np.errstate(invalid="ignore"):
                F = _noise_cdf(model.noise, edges[None, :] - img[:, None])
            P[i] = pw @ np.diff(F, axis=1)
    sums = P.sum(axis=1)
    defect = float(np.max(np.abs(sums - 1.0)))
    if defect > DEFECT_TOL:
        raise GridTooCoarseError(f"row mass defect {defect:.3g} exceeds {DEFECT_TOL:g}; "
                                 "refine the time quadrature or check the density")
    P = np.maximum(P, 0.0) / sums[:, None]
    P /= P.sum(axis=1, keepdims=True)
    return DiscreteKernel(x, P, w, defect)


def exact_stationary(kernel: DiscreteKernel) -> np.ndarray:
    P = kernel.matrix
    k = P.shape[0]
    A = np.eye(k) - P
    sv = np.linalg.svd(A, compute_uv=False)
    null_dim = int(np.sum(sv < NULL_TOL * max(1.0, sv[0])))
    if null_dim != 1:
        raise ReducibleKernelError(f"stationary law is not unique: null space of I - P has "
                                   f"dimension {null_dim}")
    M = np.vstack([A.T, np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, b, rcond=None)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    for _ in range(3):
        resid = pi @ P - pi
        if np.max(np.abs(resid)) < 1e-14:
            break
        delta, *_ = np.linalg.lstsq(M, np.concatenate([-resid, [0.0]]), rcond=None)
        pi = pi + delta
        pi = np.maximum(pi, 0.0)
        pi /= pi.sum()
    return pi


def center(kernel: DiscreteKernel, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return g - exact_stationary(kernel) @ g


def exact_chi(kernel: DiscreteKernel, g, pi: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``(I - P) chi = g`` with ``<chi, pi> = 0`` for centered ``g``."""
    g = np.asarray(g, dtype=float)
    pi = exact_stationary(kernel) if pi is None else pi
    scale = max(1.0, float(np.max(np.abs(g))))
    if abs(pi @ g) > 1e-12 * scale:
        raise ValueError(f"g is not centered: <g, pi> = {pi @ g:.3g}")
    P = kernel.matrix
    k = P.shape[0]
    A = np.eye(k) - P + np.outer(np.ones(k), pi)
    chi = np.linalg.solve(A, g)
    resid = np.max(np.abs(chi - P @ chi - g))
    if resid > 1e-10 * scale:
        raise ValueError(f"corrector system is ill-conditioned (residual {resid:.3g})")
    return chi


def exact_sigma2(kernel: DiscreteKernel, g, chi, pi: Optional[np.ndarray] = None) -> float:
    g = np.asarray(g, dtype=float)
    chi = np.asarray(chi, dtype=float)
    pi = exact_stationary(kernel) if pi is None else pi
    Z = chi[None, :] - chi[:, None] + g[:, None]
    return float(pi @ np.sum(kernel.matrix * Z ** 2, axis=1))


def exact_green_kubo(kernel: DiscreteKernel, g, pi: Optional[np.ndarray] = None,
                     max_lag: int = 100_000, tol: float = 1e-16) -> float:
    """``Var(g) + 2 sum_i Cov(g(x_0), g(x_i))`` under the stationary law, summed lag by lag."""
    pi = exact_stationary(kernel) if pi is None else pi
    g = np.asarray(g, dtype=float)
    gc = g - pi @ g
    weighted = pi * gc
    total = float(weighted @ gc)
    v = gc.copy()
    stop = tol * max(float(np.max(np.abs(gc))), np.finfo(float).tiny)
    for _ in range(max_lag):
        v = kernel.matrix @ v
        # P^i g tends to the constant pi.g = 0; re-centering keeps rounding from piling up
        v -= pi @ v
        total += 2.0 * float(weighted @ v)
        if np.max(np.abs(v)) <= stop:
            break
    return total


def exact_drift(kernel: DiscreteKernel, g, chi) -> np.ndarray:
    """``P chi - chi + g`` per state (zero for the exact corrector)."""
    chi = np.asarray(chi, dtype=float)
    return kernel.matrix @ chi - chi + np.asarray(g, dtype=float)


def embed_kernel_as_model(kernel: DiscreteKernel, name: str = "kernel") -> ModelSpec:
    """A model whose step samples a row of the kernel exactly.

    ``p`` is uniform on [0, 1] and ``S(x, t)`` is the inverse CDF of the row of
    the nearest state evaluated at ``t``; there is no noise.
    """
    states = kernel.states
    cum = np.cumsum(kernel.matrix, axis=1)
    cum[:, -1] = 1.0
    k, d = states.shape

    def S(x, t):
        i = kernel.index(x)
        t = np.asarray(t, dtype=float).reshape(-1)
        j = np.sum(cum[i] <= t[:, None], axis=1)
        return states[np.minimum(j, k - 1)].copy()

    lo, hi = states.min(axis=0), states.max(axis=0)
    return ModelSpec(
        name=name, dimension=d, T=1.0, epsilon_star=0.0, noise=NoiseSpec(0.0),
        map_S=S, density_p=lambda x, t: np.ones_like(np.asarray(t, float)),
        lipschitz_lambda=lambda x, t: np.ones_like(np.asarray(t, float)),
        base_point=states[0], audit_window=(tuple(lo), tuple(hi)),
        density_free_of_x=True, sampler=lambda x, u: np.asarray(u, dtype=float).copy(),
        states=states.copy(), audit_required=False,
        description=f"{k}-state kernel sampled by row inverse CDF",
    )


def kernel_observable(kernel: DiscreteKernel, g, name: str = "g") -> ObservableSpec:
    """Observable taking value ``g[i]`` at state ``i`` (nearest-state lookup)."""
    g = np.asarray(g, dtype=float)
    s = kernel.states
    diff = np.abs(g[:, None] - g[None, :])
    dist = np.linalg.norm(s[:, None, :] - s[None, :, :], axis=2)
    off = dist > 0
    lip = float(np.max(diff[off] / dist[off])) if np.any(off) else 0.0
    sup = float(np.max(np.abs(g)))
    tiny = np.finfo(float).tiny
    return ObservableSpec(lambda x: g[kernel.index(x)], max(lip, tiny), max(sup, tiny), name=name)


def two_state_example() -> tuple[DiscreteKernel, np.ndarray]:
    """The reference chain ``[[0.9, 0.1], [0.2, 0.8]]`` with ``g = (1, -2)``."""
    return DiscreteKernel(None, np.array([[0.9, 0.1], [0.2, 0.8]])), np.array([1.0, -2.0])
