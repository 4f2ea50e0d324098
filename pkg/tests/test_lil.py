import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifslil.corrector import CorrectorEstimate, MartingaleDecomposition
from ifslil.lil import (PiecewisePath, SigmaEstimate, autocovariances, build_eta_path,
                        build_theta_path, clt_check, default_lag, dyadic,
                        heyde_scott_from_increments, heyde_scott_sums, lil_normalizer,
                        lil_report, quadratic_variation_curve, scaled_path_bound,
                        sigma2_green_kubo, sigma2_sn_over_n, sigma2_stationary,
                        stationary_paths, strassen_distance, theta_from_partial_sums)
from ifslil.oracle import exact_chi, exact_stationary
from ifslil.rng import SeededStream
from ifslil.simulator import Trajectory, stationary_samples

from conftest import zero_obs

SIGMA2 = 34 / 3


@pytest.fixture(scope="module")
def exact_two_state(two_state):
    kernel, g, model, obs = two_state
    pi = exact_stationary(kernel)
    chi = CorrectorEstimate.from_table(kernel.states, exact_chi(kernel, g - pi @ g), g_mean=float(pi @ g))
    chi.q_hat = 0.7
    return model, obs, chi


@pytest.fixture(scope="module")
def iid_chi():
    return CorrectorEstimate.from_table(np.linspace(-0.5, 0.5, 5), np.linspace(-0.5, 0.5, 5), kind="spline")


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_sigma_estimate_ci_contains_value(v, a, b):
    est = SigmaEstimate(v, "stationary-Z", (min(a, b), max(a, b)), 1, 1)
    assert est.contains(v)
    assert est.half_width >= 0


def test_zero_observable_gives_zero(iid_model):
    model, _ = iid_model
    z = zero_obs()
    chi = CorrectorEstimate.from_table(np.linspace(-1, 1, 3), np.zeros(3), kind="spline")
    s = SeededStream(1, 1)
    for est in (sigma2_stationary(model, z, chi, 500, s, burn_in=2),
                sigma2_sn_over_n(model, z, chi, 256, 4, s, burn_in=2),
                sigma2_green_kubo(model, z, 256, 4, lag_max=5, stream=s, burn_in=2)):
        assert est.value == 0.0 and est.degenerate
    qv = quadratic_variation_curve(model, z, chi, 64, 4, s, burn_in=2)
    assert all(p.median == 0.0 for p in qv)
    hs = heyde_scott_sums(model, z, chi, 1.0, 1.0, 64, 4, s, burn_in=2)
    assert hs.th1[-1] == 0.0 and hs.th2[-1] == 0.0
    zero_sigma = sigma2_stationary(model, z, chi, 500, s, burn_in=2)
    rep = lil_report(model, z, chi, 64, [0, 1], zero_sigma, s, burn_in=2)
    assert rep.degenerate
    assert all(v == 0.0 for v in rep.final_running_max().values())
    assert rep.strassen_median() == 0.0
    assert clt_check(model, z, zero_sigma, 16, 10, s).degenerate


def test_iid_reduction(iid_model, iid_chi):
    model, obs = iid_model
    s = SeededStream(2, 2)
    st_ = sigma2_stationary(model, obs, iid_chi, 40_000, s, burn_in=2)
    direct = stationary_samples(model, 2, 40_000, stream=SeededStream(2, 3))[:, 0]
    assert st_.contains(1 / 12)
    assert abs(st_.value - direct.var()) < 3 * (st_.stderr + math.sqrt(1 / 180 / direct.size))
    gk = sigma2_green_kubo(model, obs, 4096, 16, lag_max=8, stream=s, burn_in=2)
    assert gk.contains(1 / 12)


def test_two_state_estimators_with_exact_chi(exact_two_state):
    model, obs, chi = exact_two_state
    s = SeededStream(1, 7)
    a = sigma2_stationary(model, obs, chi, 40_000, s)
    b = sigma2_sn_over_n(model, obs, chi, 20_000, 16, s)
    c = sigma2_green_kubo(model, obs, 20_000, 16, stream=s, q_hat=0.7, g_mean=chi.g_mean_estimate)
    for est in (a, b, c):
        assert est.contains(SIGMA2), est
    for x, y in ((a, b), (a, c), (b, c)):
        assert x.ci95[0] <= y.ci95[1] and y.ci95[0] <= x.ci95[1]


def test_autocovariances_match_direct():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(300, 3))
    ac = autocovariances(v, 5)
    c = v - v.mean(axis=0)
    for lag in range(6):
        direct = np.sum(c[:300 - lag] * c[lag:], axis=0) / 300
        np.testing.assert_allclose(ac[lag], direct, rtol=1e-10, atol=1e-14)


def test_default_lag():
    assert default_lag(0.7) == math.ceil(math.log(1e-4 * 0.3) / math.log(0.7))
    assert default_lag(0.01) >= 1


def test_sn_over_n_flatness_exact(two_state):
    kernel, g, _, _ = two_state
    P = kernel.matrix
    pi = exact_stationary(kernel)
    chi = exact_chi(kernel, g - pi @ g)
    gc = g - pi @ g
    z2 = np.sum(P * (chi[None, :] - chi[:, None] + gc[:, None]) ** 2, axis=1)
    # started from state A: s_n^2 = sum_{k<n} <delta_A P^k, z2> (orthogonal increments)
    law = np.array([1.0, 0.0])
    s2 = np.zeros(100_001)
    acc = 0.0
    for k in range(1, 100_001):
        acc += law @ z2
        s2[k] = acc
        law = law @ P
    r4, r5 = s2[10_000] / 1e4, s2[100_000] / 1e5
    assert abs(r5 - r4) / r5 < 0.05
    assert r5 == pytest.approx(SIGMA2, rel=1e-3)


def test_quadratic_variation_and_heyde_scott(exact_two_state):
    model, obs, chi = exact_two_state
    qv = quadratic_variation_curve(model, obs, chi, 20_000, 8, SeededStream(3, 3))
    assert [p.k for p in qv] == dyadic(20_000)
    assert qv[-1].median == pytest.approx(SIGMA2, rel=0.05)
    assert all(p.q25 <= p.median <= p.q75 for p in qv)
    hs = heyde_scott_sums(model, obs, chi, 1.0, 10.0, 4096, 8, SeededStream(3, 4), sigma2=SIGMA2)
    # |Z| <= 10 + 20/3 + 2 on this chain, so the indicator dies once 10 s_k exceeds it
    k_off = math.ceil(((10 + 20 / 3 + 2) / (10 * math.sqrt(SIGMA2))) ** 2)
    assert np.all(np.diff(hs.th2[k_off:]) == 0)
    hs1 = heyde_scott_sums(model, obs, chi, 1.0, 1.0, 20_000, 8, SeededStream(3, 5), sigma2=SIGMA2)
    k = np.arange(1, 20_001)
    inc = np.diff(np.concatenate([[0.0], hs1.th1]))
    sel = (k >= 100) & (inc > 0)
    slope = np.polyfit(np.log(k[sel]), np.log(inc[sel]), 1)[0]
    assert slope < -1
    assert hs1.converged()[0]
    rows = hs1.rows()
    assert rows[0][0] == 1 and rows[-1][0] == 20_000


def test_heyde_scott_empirical_and_validation():
    rng = np.random.default_rng(1)
    Z = rng.choice([-1.0, 1.0], size=(2000, 64))
    a = heyde_scott_from_increments(Z, 1.0, 1.0, 1.0)
    b = heyde_scott_from_increments(Z, 1.0, 1.0, None)
    assert a.th1[-1] > 0 and b.th1[-1] > 0
    assert set(a.summary()) >= {"th1_cauchy", "th2_cauchy", "th1_total"}


def test_theta_path_definitions():
    n = 1000
    ones = Trajectory(np.ones((n + 1, 1)), np.zeros(n), SeededStream(0, 0))
    from ifslil.model import ObservableSpec
    ident = ObservableSpec(lambda x: x[:, 0], 1.0, 1.0)
    path = build_theta_path(ones, ident, 2.0, n)
    assert path.node_values[0] == 0.0
    assert path.node_values[-1] == pytest.approx(n / (2.0 * math.sqrt(2 * n * math.log(math.log(n)))), rel=1e-14)
    assert path.normalization == lil_normalizer(n, 2.0)
    assert path.kind == "theta"
    rng = np.random.default_rng(2)
    states = rng.normal(size=(n + 1, 1))
    tr = Trajectory(states, np.zeros(n), SeededStream(0, 0))
    p = build_theta_path(tr, ident, 1.3, n)
    S = np.concatenate([[0.0], np.cumsum(states[1:, 0])])
    np.testing.assert_allclose(p.node_values * p.normalization, S, atol=1e-12 * np.abs(S).max())
    assert p(0.5 + 0.5 / n) == pytest.approx(0.5 * (p.node_values[500] + p.node_values[501]))
    assert build_theta_path(tr, ident, 1.0, 2).is_zero
    with pytest.raises(ValueError):
        build_theta_path(tr, ident, 1.0, n + 1)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=60), st.floats(0.1, 5))
def test_theta_nodes_reproduce_partial_sums(vals, sigma):
    S = np.concatenate([[0.0], np.cumsum(vals)])
    n = len(vals)
    p = theta_from_partial_sums(S, n, sigma)
    if n <= math.e:
        assert p.is_zero
    else:
        np.testing.assert_allclose(p.node_values * p.normalization, S, atol=1e-12 * (1 + np.abs(S).max()))


def test_eta_path():
    M = np.array([0.0, 1.0, 0.5, 2.0])
    assert build_eta_path(M, [0.0, 0.5, 1.0, 2.0]).is_zero
    s2 = np.array([0.0, 5.0, 9.0, 16.0])
    p = build_eta_path(M, s2)
    norm = math.sqrt(2 * 16 * math.log(math.log(16)))
    assert p(9 / 16) == pytest.approx(0.5 / norm)
    assert p.kind == "eta" and p.node_values[0] == 0.0
    with pytest.raises(ValueError):
        build_eta_path(M, [0.0, 2.0, 1.0, 3.0])
    dec = MartingaleDecomposition(M, np.diff(np.concatenate([[0.0], M])), None)
    assert build_eta_path(dec, s2).node_values.tolist() == p.node_values.tolist()


def test_eta_theta_agree_up_to_boundary(exact_two_state):
    model, obs, chi = exact_two_state
    from ifslil.simulator import simulate
    from ifslil.corrector import martingale_decompose
    n = 4096
    tr = simulate(model, 0.0, n, SeededStream(4, 4))
    dec = martingale_decompose(tr, chi, obs)
    eta = build_eta_path(dec, SIGMA2 * np.arange(n + 1))
    theta = build_theta_path(tr, obs, math.sqrt(SIGMA2), n, chi.g_mean_estimate)
    c = chi(tr.states)
    g = obs(tr.states) - chi.g_mean_estimate
    # M_k = S_k + chi(x_k) - chi(x_0) + g(x_0) - g(x_k)
    boundary = c - c[0] + g[0] - g
    gap = eta.node_values * eta.normalization - theta.node_values * theta.normalization
    np.testing.assert_allclose(gap, boundary, atol=1e-9)
    # the two normalizers agree to first order once log log n dominates log sigma^2
    assert abs(eta.normalization / theta.normalization - 1) < 0.2


def test_strassen_examples():
    t = np.linspace(0, 1, 11)
    assert strassen_distance(PiecewisePath(t, 0.9 * t, 1.0, "theta")) == 0.0
    assert strassen_distance(PiecewisePath(t, 2 * t, 1.0, "theta")) == pytest.approx(1.0)
    assert strassen_distance(PiecewisePath(t, 0 * t, 1.0, "theta")) == 0.0


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=40))
def test_strassen_properties(vals):
    v = np.concatenate([[0.0], vals])
    t = np.linspace(0, 1, v.size)
    p = PiecewisePath(t, v, 1.0, "theta")
    E = p.energy
    assert strassen_distance(p) <= scaled_path_bound(p) + 1e-15
    assert strassen_distance(p) >= 0
    if E > 0:
        inside = PiecewisePath(t, v / math.sqrt(E), 1.0, "theta")
        assert strassen_distance(inside) == pytest.approx(0.0, abs=1e-12)


@given(st.floats(0.1, 3), st.floats(1.0, 50), st.floats(1.0, 50))
def test_scaled_bound_monotone_in_energy(sup, e1, e2):
    # same sup-norm, more wiggles: energy grows, bound grows
    def zigzag(k):
        t = np.linspace(0, 1, 2 * k + 1)
        v = np.where(np.arange(t.size) % 2 == 1, sup, 0.0)
        return PiecewisePath(t, v, 1.0, "theta")
    a, b = zigzag(int(e1)), zigzag(int(e2))
    if a.energy <= b.energy:
        assert scaled_path_bound(a) <= scaled_path_bound(b) + 1e-15


def test_lil_report_small(exact_two_state):
    model, obs, chi = exact_two_state
    sigma = SigmaEstimate(SIGMA2, "stationary-Z", (SIGMA2 * 0.99, SIGMA2 * 1.01), 1, 1)
    rep = lil_report(model, obs, chi, 4096, [0, 1, 2, 3], sigma, SeededStream(1, 1))
    for s, curve in rep.theta1_running_max.items():
        ns = [n for n, _ in curve]
        assert ns == sorted(set(ns))
        vals = [v for _, v in curve]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(d >= 0 for c in rep.strassen_dist.values() for _, d in c)
    d = rep.to_dict()
    assert d["master_seed"] == 1 and d["seeds"] == [0, 1, 2, 3]
    again = lil_report(model, obs, chi, 4096, [2], sigma, SeededStream(1, 1))
    assert again.theta1_running_max[2] == rep.theta1_running_max[2]


def test_clt_check_exact_two_state(exact_two_state):
    model, obs, chi = exact_two_state
    res = clt_check(model, obs, SIGMA2, 2000, 300, SeededStream(2, 2), g_mean=chi.g_mean_estimate)
    assert res.pvalue > 0.01 and res.values.size == 300


def test_stationary_paths_shape(iid_model):
    model, _ = iid_model
    p = stationary_paths(model, 10, 5, SeededStream(0, 0), 3)
    assert p.shape == (11, 5, 1)
