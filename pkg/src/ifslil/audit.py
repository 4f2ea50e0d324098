"""Numerical certification of the model assumptions on a bounded window."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import isotonic_regression

from .model import (ModelDefinitionError, ModelSpec, as_states, distance,
                    evaluate_p)
from .quadrature import CompositeRule, rule_with_nodes
from .rng import SeededStream

DEFAULT_NODES = 64
DEFAULT_GRID_POINTS = 201
NORMALIZATION_TOL = 1e-6
HOLDER_TOL = 1e-6
DINI_RESIDUAL_TOL = 1e-3


@dataclass
class AssumptionConstants:
    a1: float
    a2: float
    a_2pd: float
    c: float
    M1: float
    M2: float
    normalization_defect: float


@dataclass
class AuditReport:
    constants: AssumptionConstants
    grid_spec: dict
    passed: dict
    dini_samples: list
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {
            "constants": asdict(self.constants),
            "pass": dict(self.passed),
            "grid_spec": self.grid_spec,
            "dini_samples": [[float(a), float(b)] for a, b in self.dini_samples],
            "notes": list(self.notes),
            "overall": self.ok,
        }


def audit_grid(model: ModelSpec, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Regular grid over the audit window, about ``points`` points in total."""
    lo, hi = model.audit_window
    per_dim = max(3, int(round(points ** (1.0 / model.d))))
    axes = [np.linspace(lo[i], hi[i], per_dim) for i in range(model.d)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _grid_values(model: ModelSpec, fn, x_grid: np.ndarray, t: np.ndarray) -> np.ndarray:
    xs = np.repeat(x_grid, t.size, axis=0)
    ts = np.tile(t, x_grid.shape[0])
    vals = np.asarray(fn(xs, ts), dtype=float).reshape(x_grid.shape[0], t.size)
    if not np.all(np.isfinite(vals)):
        raise ModelDefinitionError(f"non-finite integrand for model {model.name!r}")
    return vals


def _density_on_grid(model: ModelSpec, x_grid: np.ndarray, t: np.ndarray) -> np.ndarray:
    vals = _grid_values(model, model.density_p, x_grid, t)
    if np.any(vals < 0):
        raise ModelDefinitionError(f"negative density for model {model.name!r}")
    return vals


def _a_j(model: ModelSpec, j: float, x_grid: np.ndarray, rule: CompositeRule) -> float:
    t, w = rule.nodes_weights()
    lam = _grid_values(model, model.lipschitz_lambda, x_grid, t)
    if np.any(lam < 0):
        raise ModelDefinitionError(f"negative lambda for model {model.name!r}")
    p = _density_on_grid(model, x_grid, t)
    return float(np.max((lam ** j * p) @ w))


def estimate_a_j(model: ModelSpec, j: float, x_grid: Optional[np.ndarray] = None,
                 nodes: int = DEFAULT_NODES) -> float:
    """``max_x int_0^T lambda(x,t)^j p(x,t) dt`` over the grid."""
    if nodes < 64:
        raise ValueError("at least 64 quadrature nodes are required")
    x_grid = audit_grid(model) if x_grid is None else as_states(x_grid, model.d)
    if x_grid.shape[0] == 0:
        raise ValueError("empty x grid")
    return _a_j(model, j, x_grid, rule_with_nodes(model.T, nodes))


def a_j_refinement_error(model: ModelSpec, j: float, x_grid: Optional[np.ndarray] = None,
                         nodes: int = DEFAULT_NODES) -> float:
    """Change in the estimate when the node count is doubled."""
    x_grid = audit_grid(model) if x_grid is None else as_states(x_grid, model.d)
    coarse = _a_j(model, j, x_grid, rule_with_nodes(model.T, nodes))
    fine = _a_j(model, j, x_grid, rule_with_nodes(model.T, 2 * nodes))
    return abs(fine - coarse)


def check_normalization(model: ModelSpec, x_grid: Optional[np.ndarray] = None,
                        nodes: int = DEFAULT_NODES) -> float:
    x_grid = audit_grid(model) if x_grid is None else as_states(x_grid, model.d)
    t, w = rule_with_nodes(model.T, nodes).nodes_weights()
    p = _density_on_grid(model, x_grid, t)
    return float(np.max(np.abs(p @ w - 1.0)))


def estimate_c(model: ModelSpec, t_points: int = 1025) -> float:
    """``sup_t |S(xbar, t) - xbar| + epsilon_star`` on a grid including both ends."""
    t_nodes, _ = rule_with_nodes(model.T, DEFAULT_NODES).nodes_weights()
    t = np.union1d(np.linspace(0.0, model.T, t_points), t_nodes)
    xb = np.repeat(model.base_point[None, :], t.size, axis=0)
    img = np.asarray(model.map_S(xb, t), dtype=float).reshape(xb.shape)
    return float(np.max(distance(img, model.base_point)) + model.epsilon_star)


def density_bounds(model: ModelSpec, x_grid: Optional[np.ndarray] = None,
                   t_grid: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Grid minimum and maximum of ``p``.

    The default time grid omits ``t = 0``: the lower bound is an infimum over
    ``(0, T]`` only.
    """
    x_grid = audit_grid(model) if x_grid is None else as_states(x_grid, model.d)
    if t_grid is None:
        t_grid = np.linspace(0.0, model.T, 257)[1:]
    p = _density_on_grid(model, x_grid, np.asarray(t_grid, float))
    return float(p.min()), float(p.max())


def l1_density_gap(model: ModelSpec, x: np.ndarray, y: np.ndarray,
                   nodes: int = 256) -> np.ndarray:
    """``int_0^T |p(x,t) - p(y,t)| dt`` for paired rows of ``x`` and ``y``."""
    x = as_states(x, model.d)
    y = as_states(y, model.d)
    t, w = rule_with_nodes(model.T, nodes).nodes_weights()
    m = x.shape[0]
    ts = np.tile(t, m)
    px = np.asarray(model.density_p(np.repeat(x, t.size, axis=0), ts)).reshape(m, t.size)
    py = np.asarray(model.density_p(np.repeat(y, t.size, axis=0), ts)).reshape(m, t.size)
    return np.abs(px - py) @ w


def dini_probe(model: ModelSpec, pair_count: int = 200,
               stream: Optional[SeededStream] = None) -> list[tuple[float, float]]:
    """Empirical modulus points ``(rho(x,y), int |p(x,.) - p(y,.)| dt)``.

    Distances are log-spaced over ``[1e-4, 1]``; base points are uniform in the
    audit window and displaced in a random direction.
    """
    if pair_count < 100:
        raise ValueError("pair_count must be at least 100")
    stream = stream or SeededStream(0, 0xD1)
    lo, hi = model.audit_window
    d = model.d
    u = stream.block(np.arange(pair_count), 0, 2 * d)
    base = lo + (hi - lo) * u[:d].T
    if d == 1:
        direction = np.where(u[d] < 0.5, -1.0, 1.0)[:, None]
    else:
        z = u[d:2 * d].T - 0.5
        direction = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    dist = np.logspace(-4, 0, pair_count)
    other = base + dist[:, None] * direction
    # reflect back into the window when the displacement leaves it
    outside = np.any((other < lo) | (other > hi), axis=1)
    other[outside] = base[outside] - dist[outside, None] * direction[outside]
    gap = l1_density_gap(model, base, other)
    rho = distance(base, other)
    return sorted(zip(rho.tolist(), gap.tolist()))


def dini_assessment(samples: list[tuple[float, float]]) -> dict:
    """Heuristic decay check on probe samples.

    An isotonic (non-decreasing) fit of modulus against distance is computed;
    the check passes when the fit at the smallest probed distances is below
    ``DINI_RESIDUAL_TOL``, i.e. the modulus is compatible with ``omega(0+) = 0``.
    """
    if not samples:
        return {"pass": True, "small_distance_modulus": 0.0, "rms_residual": 0.0}
    rho = np.array([s[0] for s in samples])
    mod = np.array([s[1] for s in samples])
    order = np.argsort(rho, kind="stable")
    fit = isotonic_regression(mod[order]).x
    k = max(1, len(fit) // 20)
    small = float(fit[:k].max())
    rms = float(np.sqrt(np.mean((fit - mod[order]) ** 2)))
    return {"pass": small < DINI_RESIDUAL_TOL, "small_distance_modulus": small,
            "rms_residual": rms}


def _check_domain(model: ModelSpec, stream: SeededStream, count: int = 2000) -> bool:
    if model.contains is None:
        return True
    from .simulator import draw_noise
    lo, hi = model.audit_window
    d = model.d
    u = stream.block(np.arange(count), 0, d + 1)
    x = lo + (hi - lo) * u[:d].T
    t = model.T * u[d]
    h = draw_noise(model, stream.child("noise"), np.arange(count), 0)
    y = np.asarray(model.map_S(x, t)).reshape(x.shape) + h
    return bool(np.all(model.contains(y)))


def audit(model: ModelSpec, grid_points: int = DEFAULT_GRID_POINTS,
          nodes: int = DEFAULT_NODES, stream: Optional[SeededStream] = None) -> AuditReport:
    """Run every check with default grids; failures are recorded, not raised."""
    stream = stream or SeededStream(0, 0xA0D17)
    x_grid = audit_grid(model, grid_points)
    rule = rule_with_nodes(model.T, nodes)
    notes: list[str] = []
    passed = {k: False for k in ("I", "II", "III", "IV", "V", "VI")}
    nan = float("nan")
    a1 = a2 = a2pd = c = m1 = m2 = defect = nan
    errors = {}
    try:
        defect = check_normalization(model, x_grid, nodes)
        passed["I"] = defect < NORMALIZATION_TOL
    except (ModelDefinitionError, FloatingPointError) as exc:
        notes.append(f"I: {exc}")
    try:
        j = 2.0 + model.delta
        a1 = _a_j(model, 1.0, x_grid, rule)
        a2 = _a_j(model, 2.0, x_grid, rule)
        a2pd = _a_j(model, j, x_grid, rule)
        errors = {str(jj): a_j_refinement_error(model, jj, x_grid, nodes) for jj in (1.0, 2.0, j)}
        holder = (a1 <= a2pd ** (1.0 / j) + HOLDER_TOL) and (a2 <= a2pd ** (2.0 / j) + HOLDER_TOL)
        if not holder:
            notes.append("II: Hoelder chain a1 <= a_{2+d}^{1/(2+d)}, a2 <= a_{2+d}^{2/(2+d)} violated")
        passed["II"] = bool(a2pd < 1.0 and holder)
    except (ModelDefinitionError, FloatingPointError) as exc:
        notes.append(f"II: {exc}")
    try:
        c = estimate_c(model)
        passed["III"] = bool(np.isfinite(c))
    except (ModelDefinitionError, FloatingPointError) as exc:
        notes.append(f"III: {exc}")
    dini: list = []
    try:
        dini = dini_probe(model, stream=stream.child("dini"))
        assessment = dini_assessment(dini)
        passed["IV"] = assessment["pass"]
        notes.append("IV: heuristic; the integrability of omega(t)/t near 0 is not certified")
    except (ModelDefinitionError, FloatingPointError) as exc:
        assessment = {}
        notes.append(f"IV: {exc}")
    try:
        m1, m2 = density_bounds(model, x_grid)
        passed["V"] = bool(m1 > 0 and np.isfinite(m2))
    except (ModelDefinitionError, FloatingPointError) as exc:
        notes.append(f"V: {exc}")
    try:
        passed["VI"] = bool(model.noise.epsilon <= model.epsilon_star
                            and _check_domain(model, stream.child("domain")))
    except (ModelDefinitionError, FloatingPointError) as exc:
        notes.append(f"VI: {exc}")
    lo, hi = model.audit_window
    grid_spec = {
        "x_window": [lo.tolist(), hi.tolist()],
        "x_points": int(x_grid.shape[0]),
        "t_rule": f"composite Gauss-Legendre, {rule.panels} panels x {rule.order} nodes",
        "t_nodes": rule.n_nodes,
        "a_j_refinement_error": errors,
        "dini": {k: v for k, v in assessment.items()},
        "density_bounds_t_grid": "256 points on (0, T]",
    }
    consts = AssumptionConstants(a1, a2, a2pd, c, m1, m2, defect)
    return AuditReport(consts, grid_spec, passed, dini, notes)
