"""Per-step coupling of two copies of the chain and decay-rate estimation.

Both copies draw their times from a maximal coupling of ``p(x, .)`` and
``p(y, .)``: with probability equal to the overlap mass a single time is drawn
from the normalized minimum of the two densities (bit 1), otherwise each copy
draws from its own normalized residual density (bit 0).  The noise vector is
always shared.  Each coordinate on its own is an exact copy of the chain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .model import ModelSpec, ObservableSpec, as_states, distance
from .parallel import chunk_ranges, map_ordered
from .quadrature import inverse_cdf, rule_with_nodes
from .rng import SeededStream
from .simulator import (REPLICA_CHUNK, ROW_CHUNK, SAMPLER_NODES, STEP_BLOCK,
                        _check_state, _density_rows, noise_from_uniforms,
                        sample_t)

OVERLAP_EPS = 1e-12


class DegenerateFitError(RuntimeError):
    """The decay curve carries no signal above the Monte Carlo noise floor."""


@dataclass
class CoupledState:
    x: np.ndarray
    y: np.ndarray
    bit: int = 1


def overlap_mass(model: ModelSpec, x, y, nodes: int = SAMPLER_NODES) -> np.ndarray | float:
    """``int_0^T min(p(x,t), p(y,t)) dt`` per pair of rows."""
    scalar = np.asarray(x).size == model.d
    xs, ys = as_states(x, model.d), as_states(y, model.d)
    if model.density_free_of_x:
        w = np.ones(xs.shape[0])
    else:
        rule = rule_with_nodes(model.T, nodes)
        t, _ = rule.nodes_weights()
        tt = np.broadcast_to(t, (xs.shape[0], t.size))
        w = rule.integrate(np.minimum(_density_rows(model, xs)(tt), _density_rows(model, ys)(tt)))
    return float(w[0]) if scalar else w


def coupled_slots(model: ModelSpec) -> int:
    return 3 + model.noise.slots(model.d)


def _coupled_times(model: ModelSpec, x, y, u):
    m = x.shape[0]
    if model.density_free_of_x:
        t = sample_t(model, x, u[:, 1])
        return t, t.copy(), np.ones(m, dtype=np.int8)
    rule = rule_with_nodes(model.T, SAMPLER_NODES)
    tx = np.empty(m)
    ty = np.empty(m)
    bit = np.empty(m, dtype=np.int8)
    for a, b in chunk_ranges(m, ROW_CHUNK):
        px = _density_rows(model, x[a:b])
        py = _density_rows(model, y[a:b])
        nodes, _ = rule.nodes_weights()
        grid = np.broadcast_to(nodes, (b - a, nodes.size))
        pxv, pyv = px(grid), py(grid)
        low = np.minimum(pxv, pyv)
        w = rule.integrate(low)
        same = np.all(x[a:b] == y[a:b], axis=1)
        common = (u[a:b, 0] < w) | same | (w > 1.0 - OVERLAP_EPS)
        idx = np.flatnonzero(common)
        if idx.size:
            fx = _density_rows(model, x[a:b][idx])
            fy = _density_rows(model, y[a:b][idx])
            t, _ = inverse_cdf(lambda s, r: np.minimum(fx(s, r), fy(s, r)), u[a:b][idx, 1], rule,
                               values=low[idx])
            tx[a + idx] = t
            ty[a + idx] = t
        rest = np.flatnonzero(~common)
        if rest.size:
            fx = _density_rows(model, x[a:b][rest])
            fy = _density_rows(model, y[a:b][rest])
            tx[a + rest], _ = inverse_cdf(lambda s, r: np.maximum(fx(s, r) - fy(s, r), 0.0),
                                          u[a:b][rest, 1], rule, values=pxv[rest] - low[rest])
            ty[a + rest], _ = inverse_cdf(lambda s, r: np.maximum(fy(s, r) - fx(s, r), 0.0),
                                          u[a:b][rest, 2], rule, values=pyv[rest] - low[rest])
        bit[a:b] = common
    return tx, ty, bit


def coupled_step_from_uniforms(model: ModelSpec, x: np.ndarray, y: np.ndarray, u: np.ndarray):
    """One coupled transition; ``u`` has shape ``(m, 3 + noise slots)``."""
    tx, ty, bit = _coupled_times(model, x, y, u)
    h = noise_from_uniforms(model, u[:, 3:])
    x1 = np.asarray(model.map_S(x, tx), dtype=float).reshape(x.shape) + h
    y1 = np.asarray(model.map_S(y, ty), dtype=float).reshape(y.shape) + h
    return x1, y1, bit, tx, ty


def coupled_step(model: ModelSpec, cs: CoupledState, stream: SeededStream,
                 replica: int = 0, index: int = 0) -> CoupledState:
    k = coupled_slots(model)
    u = stream.uniforms(replica, np.arange(index * k, (index + 1) * k))[None, :]
    x1, y1, bit, _, _ = coupled_step_from_uniforms(
        model, as_states(cs.x, model.d), as_states(cs.y, model.d), u)
    _check_state(model, x1)
    _check_state(model, y1)
    return CoupledState(x1[0], y1[0], int(bit[0]))


def iterate_coupled(model: ModelSpec, x0, y0, stream: SeededStream, replicas: np.ndarray,
                    n: int, start: int = 0) -> Iterator[tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(k, x_k, y_k, bit_k)`` over a batch of coupled replicas."""
    replicas = np.asarray(replicas, dtype=np.uint64)
    x = as_states(x0, model.d).copy()
    y = as_states(y0, model.d).copy()
    if x.shape[0] == 1 and replicas.size > 1:
        x = np.repeat(x, replicas.size, axis=0)
    if y.shape[0] == 1 and replicas.size > 1:
        y = np.repeat(y, replicas.size, axis=0)
    k = coupled_slots(model)
    done = 0
    while done < n:
        blk = min(STEP_BLOCK, n - done)
        u = stream.block(replicas, (start + done) * k, blk * k).reshape(blk, k, -1)
        for i, (x, y, bit) in enumerate(run_coupled_uniforms(model, x, y, u)):
            yield start + done + i + 1, x, y, bit
        done += blk


def run_coupled_uniforms(model: ModelSpec, x: np.ndarray, y: np.ndarray, u: np.ndarray):
    """Advance coupled rows through pre-drawn uniforms of shape ``(steps, slots, rows)``."""
    for i in range(u.shape[0]):
        x, y, bit, _, _ = coupled_step_from_uniforms(model, x, y, u[i].T)
        yield x, y, bit


@dataclass
class CoupledTrajectory:
    xs: np.ndarray
    ys: np.ndarray
    bits: np.ndarray
    stream: SeededStream
    replica: int = 0

    @property
    def n(self) -> int:
        return self.xs.shape[0] - 1


def coupled_trajectory(model: ModelSpec, x0, y0, n: int, stream: SeededStream,
                       replica: int = 0) -> CoupledTrajectory:
    xs = np.empty((n + 1, model.d))
    ys = np.empty((n + 1, model.d))
    bits = np.ones(n + 1, dtype=np.int8)
    xs[0] = as_states(x0, model.d)[0]
    ys[0] = as_states(y0, model.d)[0]
    for k, x, y, bit in iterate_coupled(model, xs[:1], ys[:1], stream, np.array([replica]), n):
        _check_state(model, x)
        _check_state(model, y)
        xs[k], ys[k], bits[k] = x[0], y[0], bit[0]
    return CoupledTrajectory(xs, ys, bits, stream, replica)


@dataclass
class DecayFit:
    q_hat: float
    C_hat: float
    r_squared: float
    n_range: list
    curves: list = field(default_factory=list, repr=False)
    C_intercept: float = float("nan")

    @property
    def converging(self) -> bool:
        return 0.0 < self.q_hat < 1.0

    def to_dict(self) -> dict:
        return {"q_hat": self.q_hat, "C_hat": self.C_hat, "C_intercept": self.C_intercept,
                "r_squared": self.r_squared, "n_range": [list(map(int, r)) for r in self.n_range]}


def default_start_pairs(model: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    if model.states is not None:
        s = np.asarray(model.states, float).reshape(-1, model.d)
        return [(s[0], s[-1])]
    lo, hi = model.audit_window
    mid = 0.5 * (lo + hi)
    quarter = 0.25 * (hi - lo)
    return [(mid - quarter, mid + quarter), (mid, mid + quarter), (lo, hi)]


def difference_curve(model: ModelSpec, obs: ObservableSpec, x0, y0, n_max: int,
                     replicas: int, stream: SeededStream) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of ``|g(x_n) - g(y_n)|`` for ``n = 0..n_max``."""
    x0 = as_states(x0, model.d)[:1]
    y0 = as_states(y0, model.d)[:1]

    def run(rng_range):
        a, b = rng_range
        s = np.zeros(n_max + 1)
        s2 = np.zeros(n_max + 1)
        v = np.abs(obs(x0) - obs(y0)) * np.ones(b - a)
        s[0], s2[0] = v.sum(), (v * v).sum()
        for k, x, y, _ in iterate_coupled(model, x0, y0, stream, np.arange(a, b), n_max):
            v = np.abs(obs(x) - obs(y))
            s[k], s2[k] = v.sum(), (v * v).sum()
        return s, s2

    s = np.zeros(n_max + 1)
    s2 = np.zeros(n_max + 1)
    for a, b in map_ordered(run, chunk_ranges(replicas, REPLICA_CHUNK)):
        s += a
        s2 += b
    mean = s / replicas
    var = np.maximum(s2 / replicas - mean ** 2, 0.0) * replicas / max(replicas - 1, 1)
    return mean, np.sqrt(var / replicas)


def fit_decay(model: ModelSpec, obs: ObservableSpec, start_pairs: Optional[Sequence] = None,
              n_max: int = 40, replicas: int = 256,
              stream: Optional[SeededStream] = None) -> DecayFit:
    """Fit ``D_n ~ G C q^n (1 + rho(x) + rho(y))`` to coupled observable differences.

    Each pair contributes the prefix of ``n`` where ``D_n > 3 SE_n``.  The fit is
    a weighted least-squares line in ``log D_n`` with a common slope and one
    intercept per pair (weights ``(D_n / SE_n)^2``, floored so that noise-free
    points do not dominate).  ``C_hat`` is the smallest constant for which
    ``G C_hat q_hat^n (1 + rho(x) + rho(y))`` stays above the lower 2-SE band of
    every measured curve over its fitted range; ``C_intercept`` is the largest
    per-pair constant implied by the fitted intercepts alone.
    """
    if replicas < 32:
        raise ValueError("at least 32 replicas are required")
    stream = stream or SeededStream(0, 0xDECA)
    pairs = list(start_pairs) if start_pairs is not None else default_start_pairs(model)
    if not pairs:
        raise ValueError("start_pairs must be non-empty")
    rows, ys, ws, groups, ranges, curves, measured = [], [], [], [], [], [], {}
    for i, (x, y) in enumerate(pairs):
        mean, se = difference_curve(model, obs, x, y, n_max, replicas, stream.child(i))
        curves.append((mean, se))
        ok = (mean > 3.0 * se) & (mean > 1e-300)
        stop = int(np.argmin(ok)) if not ok.all() else n_max + 1
        n = np.arange(stop)
        logd = np.log(mean[:stop])
        rel = np.maximum(se[:stop] / mean[:stop], 1e-3)
        if 1 <= stop <= n_max and mean[stop] == 0.0:
            # every replica coalesced: censor at the rule-of-three bound
            n = np.append(n, stop)
            logd = np.append(logd, np.log(3.0 * mean[stop - 1] / replicas))
            rel = np.append(rel, 1.0)
        if n.size < 2:
            ranges.append((0, -1))
            continue
        ranges.append((0, int(n[-1])))
        measured[i] = np.maximum(mean[:stop] - 2.0 * se[:stop], 0.0)
        rows.extend(n)
        ys.extend(logd)
        ws.extend(1.0 / rel ** 2)
        groups.extend([i] * n.size)
    if len(set(groups)) == 0:
        raise DegenerateFitError("all coupled differences sit at the noise floor")
    groups_u = sorted(set(groups))
    g_arr = np.array(groups)
    X = np.zeros((len(rows), 1 + len(groups_u)))
    X[:, 0] = rows
    for j, g in enumerate(groups_u):
        X[g_arr == g, 1 + j] = 1.0
    yv = np.array(ys)
    sw = np.sqrt(np.array(ws))
    coef, *_ = np.linalg.lstsq(X * sw[:, None], yv * sw, rcond=None)
    fitted = X @ coef
    w = sw ** 2
    resid = np.sum(w * (yv - fitted) ** 2)
    group_mean = np.zeros_like(yv)
    for g in groups_u:
        sel = g_arr == g
        group_mean[sel] = np.average(yv[sel], weights=w[sel])
    total = np.sum(w * (yv - group_mean) ** 2)
    r2 = float(1.0 - resid / total) if total > 0 else 0.0
    q_hat = float(np.exp(coef[0]))
    G = obs.G
    consts, envelope = [], []
    for j, g in enumerate(groups_u):
        x, y = pairs[g]
        scale = G * (1.0 + float(model.rho(x)[0]) + float(model.rho(y)[0]))
        consts.append(float(np.exp(coef[1 + j])) / scale)
        lower = measured[g]
        envelope.append(float(np.max(lower / (scale * q_hat ** np.arange(lower.size)))))
    c_int = max(consts)
    return DecayFit(q_hat, max(c_int, max(envelope)), max(0.0, min(1.0, r2)), ranges, curves, c_int)


def fm_distance_curve(model: ModelSpec, x0, n_max: int, replicas: int, stream: SeededStream,
                      stationary: Optional[np.ndarray] = None,
                      burn_in: int = 60) -> list[tuple[int, float, float]]:
    """Coupling upper bound on the Fortet-Mourier distance to the invariant law.

    Companions start from stationary draws; ``E min(1, rho(x_n, y_n))`` bounds
    ``|<f, P^n delta_x0> - <f, mu*>|`` for every 1-Lipschitz ``f`` with ``|f| <= 1``.
    """
    from .simulator import stationary_samples
    if stationary is None:
        stationary = stationary_samples(model, burn_in, replicas, stream=stream.child("mu*"))
    y0 = as_states(stationary, model.d)
    y0 = y0[np.arange(replicas) % y0.shape[0]]
    x0 = as_states(x0, model.d)[:1]

    def run(rng_range):
        a, b = rng_range
        s = np.zeros(n_max + 1)
        s2 = np.zeros(n_max + 1)
        v = np.minimum(1.0, distance(np.repeat(x0, b - a, axis=0), y0[a:b]))
        s[0], s2[0] = v.sum(), (v * v).sum()
        for k, x, y, _ in iterate_coupled(model, x0, y0[a:b], stream, np.arange(a, b), n_max):
            v = np.minimum(1.0, distance(x, y))
            s[k], s2[k] = v.sum(), (v * v).sum()
        return s, s2

    s = np.zeros(n_max + 1)
    s2 = np.zeros(n_max + 1)
    for a, b in map_ordered(run, chunk_ranges(replicas, REPLICA_CHUNK)):
        s += a
        s2 += b
    mean = s / replicas
    se = np.sqrt(np.maximum(s2 / replicas - mean ** 2, 0.0) / max(replicas - 1, 1))
    return [(k, float(mean[k]), float(se[k])) for k in range(n_max + 1)]
