"""Asymptotic variance estimators, quadratic variation, Heyde-Scott sums and
the scaled partial-sum paths of the law of the iterated logarithm."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .corrector import CorrectorEstimate, MartingaleDecomposition
from .model import ModelSpec, ObservableSpec, as_states
from .parallel import chunk_ranges, map_ordered
from .rng import SeededStream
from .simulator import Trajectory, default_burn_in, iterate, stationary_samples

DEFAULT_BURN_IN = 60
BOOTSTRAP = 400
GK_TAIL = 1e-4
REPLICA_CHUNK = 256


@dataclass
class SigmaEstimate:
    value: float
    method: str
    ci95: tuple
    n_used: int
    replicas: int
    stderr: float = float("nan")

    def __post_init__(self) -> None:
        lo, hi = self.ci95
        self.ci95 = (float(min(lo, self.value)), float(max(hi, self.value)))

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci95[1] - self.ci95[0])

    @property
    def degenerate(self) -> bool:
        """True when the interval does not exclude zero."""
        return self.ci95[0] <= 0.0

    def contains(self, v: float) -> bool:
        return self.ci95[0] <= v <= self.ci95[1]

    def to_dict(self) -> dict:
        return {"value": self.value, "method": self.method, "ci95": list(self.ci95),
                "n_used": self.n_used, "replicas": self.replicas, "stderr": self.stderr}


def _burn(chi: Optional[CorrectorEstimate], burn_in: Optional[int]) -> int:
    if burn_in is not None:
        return burn_in
    if chi is not None and 0 < chi.q_hat < 1:
        return default_burn_in(chi.q_hat)
    return DEFAULT_BURN_IN


def _t_interval(per_replica: np.ndarray) -> tuple[float, tuple, float]:
    v = float(np.mean(per_replica))
    R = per_replica.size
    if R < 2:
        return v, (v, v), float("nan")
    se = float(np.std(per_replica, ddof=1) / math.sqrt(R))
    q = float(stats.t.ppf(0.975, R - 1))
    return v, (v - q * se, v + q * se), se


def stationary_paths(model: ModelSpec, n: int, replicas: int, stream: SeededStream,
                     burn_in: int) -> np.ndarray:
    """States ``(n+1, R, d)`` of replicas started from independent stationary draws."""
    x0 = stationary_samples(model, burn_in, replicas, stream=stream.child("start"))
    run_stream = stream.child("run")

    def run(rng):
        a, b = rng
        out = np.empty((n + 1, b - a, model.d))
        out[0] = x0[a:b]
        for k, x, _, _ in iterate(model, x0[a:b], run_stream, np.arange(a, b), n):
            out[k] = x
        return out

    return np.concatenate(map_ordered(run, chunk_ranges(replicas, REPLICA_CHUNK)), axis=1)


def increments_along(paths: np.ndarray, obs: ObservableSpec, chi: CorrectorEstimate) -> np.ndarray:
    """``Z_k`` for ``k = 1..n`` along each replica path; shape ``(n, R)``."""
    n1, R, d = paths.shape
    flat = paths.reshape(-1, d)
    c = chi(flat).reshape(n1, R)
    g = (obs(flat) - chi.g_mean_estimate).reshape(n1, R)
    return c[1:] - c[:-1] + g[:-1]


def sigma2_stationary(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate,
                      sample_count: int = 100_000, stream: Optional[SeededStream] = None,
                      burn_in: Optional[int] = None, bootstrap: int = BOOTSTRAP) -> SigmaEstimate:
    """Mean of ``Z_1^2`` over stationary starts, percentile bootstrap interval."""
    stream = stream or SeededStream(0, 0x5A)
    x0 = stationary_samples(model, _burn(chi, burn_in), sample_count, stream=stream.child("start"))
    _, x1, _, _ = next(iterate(model, x0, stream.child("step"), np.arange(sample_count), 1))
    z2 = (chi(x1) - chi(x0) + obs(x0) - chi.g_mean_estimate) ** 2
    value = float(np.mean(z2))
    rng = stream.child("bootstrap").generator()
    boots = np.empty(bootstrap)
    for b in range(bootstrap):
        boots[b] = z2[rng.integers(0, sample_count, sample_count)].mean()
    lo, hi = np.quantile(boots, [0.025, 0.975])
    se = float(np.std(z2, ddof=1) / math.sqrt(sample_count)) if sample_count > 1 else float("nan")
    return SigmaEstimate(value, "stationary-Z", (float(lo), float(hi)), sample_count, sample_count, se)


def sigma2_sn_over_n(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate, n: int,
                     replicas: int, stream: Optional[SeededStream] = None, block: int = 128,
                     burn_in: Optional[int] = None) -> SigmaEstimate:
    """``E M_L^2 / L`` from stationary paths, averaged over consecutive blocks.

    Each path of length ``n`` is cut into blocks of length ``block``; with a
    stationary start every block's martingale increment has second moment
    ``L sigma^2``.  ``block = n`` gives the plain ``M_n^2 / n``.  The interval
    uses the spread of per-replica means.
    """
    stream = stream or SeededStream(0, 0x5B)
    block = max(1, min(int(block), n))
    paths = stationary_paths(model, n, replicas, stream, _burn(chi, burn_in))
    Z = increments_along(paths, obs, chi)
    nb = n // block
    dM = Z[:nb * block].reshape(nb, block, replicas).sum(axis=1)
    per = np.mean(dM ** 2, axis=0) / block
    v, ci, se = _t_interval(per)
    return SigmaEstimate(max(v, 0.0), "sn-over-n", ci, nb * block, replicas, se)


def default_lag(q_hat: float, tail: float = GK_TAIL) -> int:
    if not 0 < q_hat < 1:
        return 100
    return max(1, int(math.ceil(math.log(tail * (1.0 - q_hat)) / math.log(q_hat))))


def autocovariances(v: np.ndarray, lag_max: int) -> np.ndarray:
    """Mean-subtracted autocovariances ``gamma_0..gamma_L`` per column (divisor ``n``)."""
    n = v.shape[0]
    c = v - v.mean(axis=0)
    size = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(c, size, axis=0)
    ac = np.fft.irfft(f * np.conj(f), size, axis=0)[:lag_max + 1]
    return ac / n


def sigma2_green_kubo(model: ModelSpec, obs: ObservableSpec, n: int, replicas: int,
                      lag_max: Optional[int] = None, stream: Optional[SeededStream] = None,
                      q_hat: Optional[float] = None, g_mean: float = 0.0,
                      burn_in: Optional[int] = None) -> SigmaEstimate:
    """``Var(g) + 2 sum_{i<=L} Cov(g(x_0), g(x_i))`` from stationary paths."""
    stream = stream or SeededStream(0, 0x5C)
    if lag_max is None:
        lag_max = default_lag(q_hat if q_hat is not None else 0.9)
    lag_max = int(min(lag_max, n - 1))
    burn = burn_in if burn_in is not None else (default_burn_in(q_hat) if q_hat and 0 < q_hat < 1
                                                else DEFAULT_BURN_IN)
    paths = stationary_paths(model, n - 1, replicas, stream, burn)
    g = (obs(paths.reshape(-1, model.d)) - g_mean).reshape(n, replicas)
    ac = autocovariances(g, lag_max)
    per = ac[0] + 2.0 * ac[1:].sum(axis=0)
    v, ci, se = _t_interval(per)
    return SigmaEstimate(max(v, 0.0), "green-kubo", ci, n, replicas, se)


@dataclass
class QVPoint:
    k: int
    median: float
    q25: float
    q75: float


def dyadic(n: int, start: int = 1) -> list[int]:
    out = []
    k = start
    while k <= n:
        out.append(k)
        k *= 2
    if not out or out[-1] != n:
        out.append(n)
    return out


def quadratic_variation_curve(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate,
                              n: int, replicas: int, stream: Optional[SeededStream] = None,
                              burn_in: Optional[int] = None) -> list[QVPoint]:
    """Running ``(1/k) sum_{l<=k} Z_l^2`` per replica, summarized at dyadic ``k``."""
    stream = stream or SeededStream(0, 0x5D)
    paths = stationary_paths(model, n, replicas, stream, _burn(chi, burn_in))
    Z = increments_along(paths, obs, chi)
    run = np.cumsum(Z ** 2, axis=0) / np.arange(1, n + 1)[:, None]
    out = []
    for k in dyadic(n):
        q25, med, q75 = np.quantile(run[k - 1], [0.25, 0.5, 0.75])
        out.append(QVPoint(k, float(med), float(q25), float(q75)))
    return out


@dataclass
class HeydeScottSums:
    k: np.ndarray
    th1: np.ndarray
    th2: np.ndarray
    gamma: float
    vartheta: float

    @staticmethod
    def _cauchy(partial: np.ndarray, frac: float = 0.25, tol: float = 0.01) -> tuple[bool, float]:
        total = float(partial[-1])
        start = int(math.floor((1.0 - frac) * partial.size))
        inc = total - float(partial[start - 1] if start > 0 else 0.0)
        return inc <= tol * abs(total), inc

    def converged(self, tol: float = 0.01) -> tuple[bool, bool]:
        return self._cauchy(self.th1, tol=tol)[0], self._cauchy(self.th2, tol=tol)[0]

    def summary(self) -> dict:
        c1, i1 = self._cauchy(self.th1)
        c2, i2 = self._cauchy(self.th2)
        return {"gamma": self.gamma, "vartheta": self.vartheta,
                "th1_total": float(self.th1[-1]), "th1_last_quarter_increment": i1, "th1_cauchy": c1,
                "th2_total": float(self.th2[-1]), "th2_last_quarter_increment": i2, "th2_cauchy": c2}

    def rows(self) -> list:
        return [[int(k), float(self.th1[k - 1]), float(self.th2[k - 1])] for k in dyadic(self.k.size)]


def heyde_scott_from_increments(Z: np.ndarray, gamma: float, vartheta: float,
                                sigma2: Optional[float] = None) -> HeydeScottSums:
    """Partial sums of both conditions from increments ``Z`` of shape ``(n, R)``.

    ``s_k^2 = k sigma2`` when ``sigma2`` is given, otherwise the replica mean of
    ``M_k^2``.
    """
    n = Z.shape[0]
    k = np.arange(1, n + 1)
    if sigma2 is None:
        s2 = np.mean(np.cumsum(Z, axis=0) ** 2, axis=1)
    else:
        s2 = k * float(sigma2)
    s = np.sqrt(s2)
    absz = np.abs(Z)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.mean(np.where(absz < gamma * s[:, None], Z ** 4, 0.0), axis=1) / s2 ** 2
        t2 = np.mean(np.where(absz >= vartheta * s[:, None], absz, 0.0), axis=1) / s
    t1 = np.where(s2 > 0, t1, 0.0)
    t2 = np.where(s2 > 0, t2, 0.0)
    return HeydeScottSums(k, np.cumsum(t1), np.cumsum(t2), float(gamma), float(vartheta))


def heyde_scott_sums(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate,
                     gamma: float, vartheta: float, n: int, replicas: int,
                     stream: Optional[SeededStream] = None, sigma2: Optional[float] = None,
                     empirical: bool = False, burn_in: Optional[int] = None) -> HeydeScottSums:
    """Empirical partial sums of the two Heyde-Scott series.

    ``s_n^2`` is ``n sigma2`` (``sigma2`` defaults to the replica mean of ``Z^2``);
    ``empirical`` switches to replica-estimated ``E M_n^2``.
    """
    stream = stream or SeededStream(0, 0x5E)
    paths = stationary_paths(model, n, replicas, stream, _burn(chi, burn_in))
    Z = increments_along(paths, obs, chi)
    if empirical:
        return heyde_scott_from_increments(Z, gamma, vartheta, None)
    if sigma2 is None:
        sigma2 = float(np.mean(Z ** 2))
    return heyde_scott_from_increments(Z, gamma, vartheta, sigma2)


@dataclass
class PiecewisePath:
    """Linear interpolation of ``node_values`` at abscissae ``t`` on [0, 1]."""
    t: np.ndarray
    node_values: np.ndarray
    normalization: float
    kind: str

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.node_values = np.asarray(self.node_values, dtype=float)
        if self.t.shape != self.node_values.shape or self.t.size < 2:
            raise ValueError("path needs matching abscissae and values (at least two nodes)")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("abscissae must be non-decreasing")

    def __call__(self, s) -> np.ndarray:
        return np.interp(s, self.t, self.node_values)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.node_values)))

    @property
    def energy(self) -> float:
        """``int_0^1 f'(t)^2 dt``."""
        dt = np.diff(self.t)
        dv = np.diff(self.node_values)
        if np.any((dt == 0) & (dv != 0)):
            return float("inf")
        ok = dt > 0
        return float(np.sum(dv[ok] ** 2 / dt[ok]))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.node_values)

    def rows(self) -> list:
        return [[a, b] for a, b in zip(self.t, self.node_values)]

    def to_csv(self, path) -> None:
        from .io import write_csv
        write_csv(path, ["t", "value"], self.rows())


def lil_normalizer(n: float, sigma: float) -> float:
    """``sigma sqrt(2 n log log n)``, or 0 where ``log log n <= 0``."""
    if n <= math.e:
        return 0.0
    return sigma * math.sqrt(2.0 * n * math.log(math.log(n)))


def theta_from_partial_sums(S: np.ndarray, n: int, sigma: float) -> PiecewisePath:
    """Path from partial sums ``S[k] = sum_{i=1..k} g(x_i)``, ``k = 0..n``."""
    t = np.arange(n + 1) / n if n > 0 else np.array([0.0, 1.0])
    norm = lil_normalizer(n, sigma)
    if norm == 0.0 or n == 0:
        return PiecewisePath(t, np.zeros_like(t), norm, "theta")
    return PiecewisePath(t, np.asarray(S[:n + 1], dtype=float) / norm, norm, "theta")


def _states(traj) -> np.ndarray:
    return traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)


def build_theta_path(traj, obs: ObservableSpec, sigma: float, n: int,
                     g_mean: float = 0.0) -> PiecewisePath:
    """Nodes at ``k/n`` hold ``sum_{i=1..k} g(x_i) / (sigma sqrt(2 n log log n))``."""
    states = _states(traj)
    if states.shape[0] < n + 1:
        raise ValueError(f"trajectory has {states.shape[0]} states, need {n + 1}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    g = obs(states[1:n + 1].reshape(n, -1)) - g_mean if n > 0 else np.empty(0)
    S = np.concatenate([[0.0], np.cumsum(g)])
    return theta_from_partial_sums(S, n, sigma)


def build_eta_path(decomp: MartingaleDecomposition | np.ndarray, s_squared: Sequence[float],
                   n: Optional[int] = None) -> PiecewisePath:
    """Martingale path with nodes ``(s_k^2 / s_n^2, M_k / sqrt(2 s_n^2 log log s_n^2))``.

    ``s_squared[k]`` is ``s_k^2`` for ``k = 0..n`` (``s_0^2 = 0``).
    """
    M = decomp.M if isinstance(decomp, MartingaleDecomposition) else np.asarray(decomp, float)
    s2 = np.asarray(s_squared, dtype=float)
    if np.any(np.diff(s2) <= 0):
        raise ValueError("s_squared must be strictly increasing")
    n = s2.size - 1 if n is None else int(n)
    if M.size < n + 1 or s2.size < n + 1:
        raise ValueError("not enough martingale values or variances for this n")
    sn2 = s2[n]
    if n == 0 or sn2 <= math.e:
        t = s2[:n + 1] / sn2 if n > 0 and sn2 > 0 else np.array([0.0, 1.0])
        return PiecewisePath(t, np.zeros_like(t), 0.0, "eta")
    norm = math.sqrt(2.0 * sn2 * math.log(math.log(sn2)))
    t = s2[:n + 1] / sn2
    vals = M[:n + 1].astype(float) / norm
    if t[0] > 0:
        t = np.concatenate([[0.0], t])
        vals = np.concatenate([[0.0], vals])
    return PiecewisePath(t, vals, norm, "eta")


def scaled_path_bound(path: PiecewisePath) -> float:
    """``(1 - 1/max(1, sqrt(E))) sup|f|``: distance to the scaled copy ``f / sqrt(E)``."""
    E = path.energy
    if not np.isfinite(E):
        return float("inf")
    return (1.0 - 1.0 / max(1.0, math.sqrt(E))) * path.sup_norm


def strassen_distance(path: PiecewisePath, refine: bool = True) -> float:
    """Upper bound on the sup-distance from ``path`` to the unit-energy ball.

    The scaled copy bound is applied to the path itself and, with ``refine``, to
    coarser interpolants ``f_m`` of the path at ``m + 1`` equally spaced times;
    ``||f - f_m|| + bound(f_m)`` is also an upper bound and is often much
    smaller for rough paths.  The minimum over candidates is returned.
    """
    best = scaled_path_bound(path)
    if not refine or best == 0.0:
        return best
    f = path.node_values
    m = 1
    limit = max(2, path.t.size - 1)
    while m <= limit:
        grid = np.linspace(0.0, 1.0, m + 1)
        coarse = PiecewisePath(grid, path(grid), path.normalization, path.kind)
        gap = float(np.max(np.abs(f - coarse(path.t))))
        if gap < best:
            best = min(best, gap + scaled_path_bound(coarse))
        m *= 2
    return best


@dataclass
class CLTResult:
    pvalue: float
    statistic: float
    n: int
    replicas: int
    degenerate: bool = False
    values: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def clt_check(model: ModelSpec, obs: ObservableSpec, sigma: SigmaEstimate | float,
              n: int = 10_000, replicas: int = 1000, stream: Optional[SeededStream] = None,
              g_mean: float = 0.0, burn_in: int = DEFAULT_BURN_IN) -> CLTResult:
    """KS test of ``n^{-1/2} sum_{i<n} g(x_i) / sigma`` against N(0, 1) from stationary starts."""
    stream = stream or SeededStream(0, 0xC17)
    sig2 = sigma.value if isinstance(sigma, SigmaEstimate) else float(sigma)
    degenerate = isinstance(sigma, SigmaEstimate) and sigma.degenerate
    if degenerate or sig2 <= 0:
        return CLTResult(float("nan"), 0.0, n, replicas, True)
    x0 = stationary_samples(model, burn_in, replicas, stream=stream.child("start"))
    run_stream = stream.child("run")

    def run(rng):
        a, b = rng
        acc = obs(x0[a:b]) - g_mean
        for k, x, _, _ in iterate(model, x0[a:b], run_stream, np.arange(a, b), n - 1):
            acc = acc + (obs(x) - g_mean)
        return acc

    sums = np.concatenate(map_ordered(run, chunk_ranges(replicas, REPLICA_CHUNK)))
    vals = sums / math.sqrt(n) / math.sqrt(sig2)
    res = stats.kstest(vals, "norm")
    return CLTResult(float(res.pvalue), float(res.statistic), n, replicas, False, vals)


@dataclass
class LilReport:
    sigma: SigmaEstimate
    theta1_running_max: dict
    strassen_dist: dict
    clt_ks_pvalue: float
    hs_condition_sums: HeydeScottSums
    seeds: list
    stream: SeededStream
    n_max: int
    band: tuple = (0.55, 1.45)
    degenerate: bool = False
    notes: list = field(default_factory=list)

    def final_running_max(self) -> dict:
        return {s: (v[-1][1] if v else 0.0) for s, v in self.theta1_running_max.items()}

    def in_band_count(self) -> int:
        lo, hi = self.band
        return sum(1 for v in self.final_running_max().values() if lo <= v <= hi)

    def strassen_median(self) -> float:
        finals = [v[-1][1] for v in self.strassen_dist.values() if v]
        return float(np.median(finals)) if finals else 0.0

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma.to_dict(),
            "seeds": list(self.seeds),
            "master_seed": self.stream.master_seed, "stream_id": self.stream.stream_id,
            "n_max": self.n_max, "band": list(self.band), "degenerate": self.degenerate,
            "theta1_running_max": {str(s): [[int(n), v] for n, v in r]
                                   for s, r in self.theta1_running_max.items()},
            "strassen_dist": {str(s): [[int(n), v] for n, v in r] for s, r in self.strassen_dist.items()},
            "final_running_max": {str(s): v for s, v in self.final_running_max().items()},
            "in_band_count": self.in_band_count(),
            "strassen_median_at_n_max": self.strassen_median(),
            "clt_ks_pvalue": self.clt_ks_pvalue,
            "hs_condition_sums": self.hs_condition_sums.summary(),
            "notes": list(self.notes),
        }


def lil_report(model: ModelSpec, obs: ObservableSpec, chi: CorrectorEstimate, N_max: int,
               seeds: Sequence[int], sigma: SigmaEstimate, stream: Optional[SeededStream] = None,
               burn_in: Optional[int] = None, gamma: float = 1.0, vartheta: float = 1.0,
               first_checkpoint: int = 4) -> LilReport:
    """One path of length ``N_max`` per seed; seed ``s`` is replica ``s`` of ``stream``.

    Records the running maximum of ``|theta_n(1)|`` and the distance bound at
    dyadic ``n``, a KS test of ``S_n* / sigma`` across seeds at ``n = N_max / 16``,
    and Heyde-Scott partial sums from the seeds' martingale increments.
    """
    stream = stream or SeededStream(0, 0x111)
    seeds = [int(s) for s in seeds]
    g_mean = chi.g_mean_estimate
    notes = [f"LIL band {0.55}-{1.45} is a finite-n acceptance window, not the limit value 1"]
    checkpoints = dyadic(N_max, first_checkpoint)
    if sigma.degenerate or sigma.value <= 0:
        zero = {s: [(n, 0.0) for n in checkpoints] for s in seeds}
        hs = HeydeScottSums(np.arange(1, 2), np.zeros(1), np.zeros(1), gamma, vartheta)
        notes.append("sigma^2 interval contains 0: normalization refused, statistics set to 0")
        return LilReport(sigma, zero, dict(zero), float("nan"), hs, seeds, stream, N_max,
                         degenerate=True, notes=notes)
    sig = math.sqrt(sigma.value)
    burn = _burn(chi, burn_in)
    x0 = stationary_samples(model, burn, max(seeds) + 1, stream=stream.child("start"))[seeds]
    run_stream = stream.child("run")
    paths = np.empty((N_max + 1, len(seeds), model.d))
    paths[0] = x0
    for k, x, _, _ in iterate(model, x0, run_stream, np.array(seeds), N_max):
        paths[k] = x
    flat = paths.reshape(-1, model.d)
    g = (obs(flat) - g_mean).reshape(N_max + 1, len(seeds))
    c = chi(flat).reshape(N_max + 1, len(seeds))
    Z = c[1:] - c[:-1] + g[:-1]
    S = np.vstack([np.zeros((1, len(seeds))), np.cumsum(g[1:], axis=0)])

    theta_max, dist = {}, {}
    for j, s in enumerate(seeds):
        run, cur, dd = [], 0.0, []
        for n in checkpoints:
            path = theta_from_partial_sums(S[:n + 1, j], n, sig)
            cur = max(cur, abs(float(path.node_values[-1])))
            run.append((n, cur))
            dd.append((n, strassen_distance(path)))
        theta_max[s] = run
        dist[s] = dd
    m = max(1, N_max // 16)
    star = g[:m].sum(axis=0) / math.sqrt(m) / sig
    ks = float(stats.kstest(star, "norm").pvalue) if len(seeds) >= 2 else float("nan")
    hs = heyde_scott_from_increments(Z, gamma, vartheta, sigma.value)
    return LilReport(sigma, theta_max, dist, ks, hs, seeds, stream, N_max, notes=notes)
