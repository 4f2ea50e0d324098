"""Sampling the perturbed chain ``x' = S(x, t) + h``.

Draw layout: step ``k`` of replica ``r`` reads uniforms
``k * slots + j`` of substream ``r``, with slot 0 driving the time ``t`` and the
remaining slots the noise.  A replica's path is therefore a function of
``(master_seed, stream_id, r)`` only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .model import DomainError, ModelDefinitionError, ModelSpec, as_states
from .parallel import chunk_ranges, map_ordered
from .quadrature import inverse_cdf, rule_with_nodes
from .rng import SeededStream

SAMPLER_NODES = 64
NORMALIZATION_TOL = 1e-6
ROW_CHUNK = 8192
STEP_BLOCK = 512
REPLICA_CHUNK = 4096


def _density_rows(model: ModelSpec, x: np.ndarray):
    def f(t: np.ndarray, rows=None) -> np.ndarray:
        m, k = t.shape
        xs = x if rows is None else x[rows]
        v = model.density_p(np.repeat(xs, k, axis=0), t.reshape(-1))
        return np.asarray(v, dtype=float).reshape(m, k)
    return f


def sample_t(model: ModelSpec, x, u) -> np.ndarray:
    """Inverse-CDF draw of the time from ``p(x, .)``.

    Uses the model's closed-form sampler when it has one, otherwise bisection
    on the cumulative quadrature.
    """
    xs = as_states(x, model.d)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any((u < 0) | (u >= 1)):
        raise ValueError("u must lie in [0, 1)")
    if xs.shape[0] == 1 and u.size > 1:
        xs = np.repeat(xs, u.size, axis=0)
    if model.sampler is not None:
        return np.clip(np.asarray(model.sampler(xs, u), dtype=float), 0.0, model.T)
    rule = rule_with_nodes(model.T, SAMPLER_NODES)
    out = np.empty(u.size)
    for a, b in chunk_ranges(u.size, ROW_CHUNK):
        t, total = inverse_cdf(_density_rows(model, xs[a:b]), u[a:b], rule, normalize=False)
        if np.any(np.abs(total - 1.0) > NORMALIZATION_TOL):
            raise ModelDefinitionError(
                f"density of {model.name!r} does not integrate to 1 (max defect "
                f"{np.max(np.abs(total - 1.0)):.3g})")
        out[a:b] = t
    return out


def sample_t_rejection(model: ModelSpec, x, rng: np.random.Generator,
                       envelope: Optional[float] = None, max_iter: int = 10**6) -> np.ndarray:
    """Alternative sampler: rejection under the constant envelope ``M2``.

    The number of uniforms consumed per draw is random, so this path is not
    used by the reproducible engine; it serves as an independent check on the
    inverse-CDF sampler.
    """
    xs = as_states(x, model.d)
    if envelope is None:
        from .audit import density_bounds
        envelope = density_bounds(model)[1] * (1 + 1e-9)
    out = np.empty(xs.shape[0])
    todo = np.arange(xs.shape[0])
    for _ in range(max_iter):
        if todo.size == 0:
            return out
        t = rng.random(todo.size) * model.T
        accept = rng.random(todo.size) * envelope <= model.density_p(xs[todo], t)
        out[todo[accept]] = t[accept]
        todo = todo[~accept]
    raise RuntimeError("rejection sampler exceeded its iteration cap")


def noise_from_uniforms(model: ModelSpec, u: np.ndarray) -> np.ndarray:
    return model.noise.sample(u, model.d)


def draw_noise(model: ModelSpec, stream: SeededStream, replicas: np.ndarray, step: int) -> np.ndarray:
    ns = model.noise.slots(model.d)
    if ns == 0:
        return np.zeros((len(replicas), model.d))
    u = stream.block(replicas, step * ns, ns).T
    return noise_from_uniforms(model, u)


def _check_state(model: ModelSpec, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite state produced by {model.name!r}")
    if model.contains is not None and not np.all(model.contains(x)):
        raise DomainError(f"state left the declared state space of {model.name!r}")


def step_from_uniforms(model: ModelSpec, x: np.ndarray, u: np.ndarray):
    """One transition driven by uniforms ``u`` of shape ``(m, 1 + noise slots)``."""
    t = sample_t(model, x, u[:, 0])
    h = noise_from_uniforms(model, u[:, 1:])
    img = np.asarray(model.map_S(x, t), dtype=float).reshape(x.shape)
    return img + h, t, h


def slots(model: ModelSpec) -> int:
    return 1 + model.noise.slots(model.d)


def step(model: ModelSpec, x, stream: SeededStream, replica: int = 0, index: int = 0):
    """Single transition of one replica at step ``index``: returns ``(x', t, h)``."""
    k = slots(model)
    u = stream.uniforms(replica, np.arange(index * k, (index + 1) * k))[None, :]
    x1, t, h = step_from_uniforms(model, as_states(x, model.d), u)
    _check_state(model, x1)
    return x1[0], float(t[0]), h[0]


def iterate(model: ModelSpec, x0: np.ndarray, stream: SeededStream, replicas: np.ndarray,
            n: int, start: int = 0) -> Iterator[tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(k, x_k, t_k, h_k)`` for ``k = start+1 .. start+n`` over a replica batch."""
    replicas = np.asarray(replicas, dtype=np.uint64)
    x = as_states(x0, model.d).copy()
    if x.shape[0] == 1 and replicas.size > 1:
        x = np.repeat(x, replicas.size, axis=0)
    k = slots(model)
    done = 0
    while done < n:
        blk = min(STEP_BLOCK, n - done)
        u = stream.block(replicas, (start + done) * k, blk * k).reshape(blk, k, -1)
        for i in range(blk):
            x, t, h = step_from_uniforms(model, x, u[i].T)
            _check_state(model, x)
            yield start + done + i + 1, x, t, h
        done += blk


@dataclass
class Trajectory:
    states: np.ndarray          # (n+1, d)
    times: np.ndarray           # (n,)
    stream: SeededStream
    replica: int = 0
    noise: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[0] - 1

    def to_csv(self, path) -> None:
        from .io import write_csv
        d = self.states.shape[1]
        header = ["n", "t"] + [f"x_{i}" for i in range(d)]
        t = np.concatenate([[np.nan], self.times])
        rows = [[k, t[k], *self.states[k]] for k in range(len(self))]
        write_csv(path, header, rows)


def simulate(model: ModelSpec, x0, n: int, stream: SeededStream, replica: int = 0) -> Trajectory:
    x0 = as_states(x0, model.d)[:1]
    states = np.empty((n + 1, model.d))
    times = np.empty(n)
    noise = np.empty((n, model.d))
    states[0] = x0[0]
    for k, x, t, h in iterate(model, x0, stream, np.array([replica]), n):
        states[k] = x[0]
        times[k - 1] = t[0]
        noise[k - 1] = h[0]
    return Trajectory(states, times, stream, replica, noise)


def simulate_batch(model: ModelSpec, x0, n: int, stream: SeededStream,
                   replicas: np.ndarray) -> np.ndarray:
    """States of shape ``(n+1, R, d)`` for a batch of replicas."""
    replicas = np.asarray(replicas)
    x0 = as_states(x0, model.d)
    if x0.shape[0] == 1:
        x0 = np.repeat(x0, replicas.size, axis=0)
    out = np.empty((n + 1, replicas.size, model.d))
    out[0] = x0
    for k, x, _, _ in iterate(model, x0, stream, replicas, n):
        out[k] = x
    return out


def default_burn_in(q_hat: float, target: float = 1e-6) -> int:
    """Steps for a geometric rate ``q_hat`` to fall below ``target``."""
    if not 0 < q_hat < 1:
        raise ValueError("q_hat must lie in (0, 1)")
    return int(math.ceil(math.log(target) / math.log(q_hat)))


def stationary_samples(model: ModelSpec, burn_in: int, count: int, thinning: int = 1,
                       stream: Optional[SeededStream] = None, replicas: Optional[int] = None,
                       x0=None) -> np.ndarray:
    """Approximate draws from the invariant law, shape ``(count, d)``.

    By default every sample comes from its own replica started at the base
    point and run for ``burn_in`` steps.  With ``replicas < count`` each replica
    contributes ``ceil(count / replicas)`` states spaced ``thinning`` apart.
    """
    if burn_in < 0 or thinning < 1:
        raise ValueError("burn_in must be >= 0 and thinning >= 1")
    if count == 0:
        return np.empty((0, model.d))
    stream = stream or SeededStream(0, 0x57A7)
    replicas = count if replicas is None else max(1, min(int(replicas), count))
    per = -(-count // replicas)
    start = model.base_point if x0 is None else x0

    def run(rng_range):
        a, b = rng_range
        reps = np.arange(a, b)
        x = as_states(start, model.d)
        x = np.repeat(x, reps.size, axis=0) if x.shape[0] == 1 else x[a:b]
        got = []
        total = burn_in + (per - 1) * thinning
        if total == 0:
            return x[:, None, :]
        for k, xk, _, _ in iterate(model, x, stream, reps, total):
            if k >= burn_in and (k - burn_in) % thinning == 0:
                got.append(xk.copy())
        return np.stack(got, axis=1)

    parts = map_ordered(run, chunk_ranges(replicas, REPLICA_CHUNK))
    samples = np.concatenate(parts, axis=0).reshape(-1, model.d)
    return samples[:count]


@dataclass
class MomentPoint:
    n: int
    estimate: float
    stderr: float
    bound: float


def moment_bound(a_j: float, j: float, c: float, initial_moment: float, n) -> np.ndarray:
    """Upper bound on the j-th moment of ``rho(x_n)`` from the contraction recursion."""
    r = a_j ** (1.0 / j)
    n = np.asarray(n, dtype=float)
    return (r ** n * initial_moment ** (1.0 / j) + c / (1.0 - r)) ** j


def moment_curve(model: ModelSpec, initial_samples, j: float, n_max: int,
                 stream: SeededStream, a_j: Optional[float] = None,
                 c: Optional[float] = None) -> list[MomentPoint]:
    """Monte Carlo ``E rho^j(x_n)`` for ``n <= n_max`` alongside the analytic bound.

    One replica per initial sample.  ``a_j`` and ``c`` default to audited values.
    """
    from .audit import estimate_a_j, estimate_c
    x0 = as_states(initial_samples, model.d)
    if a_j is None:
        a_j = estimate_a_j(model, j)
    if c is None:
        c = estimate_c(model)
    m0 = float(np.mean(model.rho(x0) ** j))
    bounds = moment_bound(a_j, j, c, m0, np.arange(n_max + 1))
    sums = np.zeros(n_max + 1)
    sq = np.zeros(n_max + 1)

    def run(rng_range):
        a, b = rng_range
        s = np.zeros(n_max + 1)
        s2 = np.zeros(n_max + 1)
        v = model.rho(x0[a:b]) ** j
        s[0], s2[0] = v.sum(), (v * v).sum()
        for k, x, _, _ in iterate(model, x0[a:b], stream, np.arange(a, b), n_max):
            v = model.rho(x) ** j
            s[k], s2[k] = v.sum(), (v * v).sum()
        return s, s2

    for s, s2 in map_ordered(run, chunk_ranges(x0.shape[0], REPLICA_CHUNK)):
        sums += s
        sq += s2
    m = x0.shape[0]
    mean = sums / m
    mean[0] = m0
    var = np.maximum(sq / m - mean ** 2, 0.0) * m / max(m - 1, 1)
    se = np.sqrt(var / m)
    return [MomentPoint(k, float(mean[k]), float(se[k]), float(bounds[k])) for k in range(n_max + 1)]
