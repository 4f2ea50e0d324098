"""Composite Gauss-Legendre quadrature on [0, T] and inverse-CDF sampling."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

GL_ORDER = 8
BISECTION_TOL = 1e-10
MAX_ITER = 200


@lru_cache(maxsize=None)
def _gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


@dataclass(frozen=True)
class CompositeRule:
    """Panels of equal width on [0, T], ``order`` Gauss points per panel."""

    T: float
    panels: int
    order: int = GL_ORDER

    @property
    def n_nodes(self) -> int:
        return self.panels * self.order

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.panels + 1)

    def nodes_weights(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = _gauss_legendre(self.order)
        e = self.edges
        h = np.diff(e)
        nodes = e[:-1, None] + 0.5 * h[:, None] * (x[None, :] + 1.0)
        weights = 0.5 * h[:, None] * w[None, :]
        return nodes.ravel(), weights.ravel()

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples taken at ``nodes_weights()[0]`` along the last axis."""
        _, w = self.nodes_weights()
        return (values * w).sum(-1)

    def panel_sums(self, values: np.ndarray) -> np.ndarray:
        _, w = self.nodes_weights()
        v = values * w
        return v.reshape(v.shape[:-1] + (self.panels, self.order)).sum(-1)


def rule_with_nodes(T: float, n_nodes: int, order: int = GL_ORDER) -> CompositeRule:
    if n_nodes < order or n_nodes % order:
        raise ValueError(f"node count must be a positive multiple of {order}")
    return CompositeRule(float(T), n_nodes // order, order)


def _partial_integral(density: Callable, a: np.ndarray, b: np.ndarray, order: int,
                      rows: Optional[np.ndarray] = None) -> np.ndarray:
    x, w = _gauss_legendre(order)
    half = 0.5 * (b - a)
    t = a[:, None] + half[:, None] * (x[None, :] + 1.0)
    # row-wise sum rather than a matmul: BLAS rounding depends on the row count,
    # which would make a replica's draw depend on its batch
    return half * (density(t, rows) * w).sum(-1)


def inverse_cdf(density: Callable, u: np.ndarray,
                rule: CompositeRule, normalize: bool = True,
                tol: float = BISECTION_TOL, values: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``F(t) = u`` row by row, where ``F`` is the cumulative integral.

    ``density(t, rows)`` receives a ``(len(rows), k)`` array of times, row ``i``
    belonging to sample ``rows[i]`` (all samples when ``rows`` is None), and
    returns values of the same shape.  The cumulative integral
    over the panel grid is tabulated once, the panel holding ``u`` is found by
    search, and the root inside the panel is found by Newton steps kept inside
    a shrinking bracket (bisection whenever a step would leave it), to ``tol``.

    Returns ``(t, total)`` where ``total`` is the row's integral over [0, T].
    With ``normalize`` the row is divided by its total before inversion.
    ``values`` may carry the density already evaluated at the rule's nodes.
    """
    u = np.asarray(u, dtype=float)
    m = u.shape[0]
    nodes, _ = rule.nodes_weights()
    vals = density(np.broadcast_to(nodes, (m, nodes.size)), None) if values is None else values
    psum = rule.panel_sums(vals)
    cum = np.concatenate([np.zeros((m, 1)), np.cumsum(psum, axis=1)], axis=1)
    total = cum[:, -1].copy()
    scale = np.where(total > 0, total, 1.0) if normalize else np.ones(m)
    target = u * scale
    k = np.sum(cum[:, 1:-1] <= target[:, None], axis=1)
    edges = rule.edges
    lo = edges[k].astype(float)
    hi = edges[k + 1].astype(float)
    resid = target - cum[np.arange(m), k]
    a0 = lo.copy()
    t = 0.5 * (lo + hi)
    active = np.arange(m)
    for _ in range(MAX_ITER):
        if active.size == 0:
            break
        ta, la, ha, a = t[active], lo[active], hi[active], a0[active]
        f = _partial_integral(density, a, ta, rule.order, active) - resid[active]
        dens = density(ta[:, None], active)[:, 0]
        la = np.where(f < 0, ta, la)
        ha = np.where(f < 0, ha, ta)
        with np.errstate(divide="ignore", invalid="ignore"):
            nt = ta - f / dens
        bad = ~np.isfinite(nt) | (nt <= la) | (nt >= ha)
        nt = np.where(bad, 0.5 * (la + ha), nt)
        done = (np.abs(nt - ta) < tol) | (ha - la < tol)
        t[active], lo[active], hi[active] = nt, la, ha
        active = active[~done]
    t = np.where(u <= 0.0, 0.0, t)
    return np.clip(t, 0.0, rule.T), total
