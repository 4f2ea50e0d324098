import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifslil.registry import builtin_model
from ifslil.oracle import (DiscreteKernel, GridTooCoarseError, ReducibleKernelError, center,
                           discretize, embed_kernel_as_model, exact_chi, exact_drift,
                           exact_green_kubo, exact_sigma2, exact_stationary, kernel_observable,
                           load_kernel_csv, two_state_example)
from ifslil.rng import SeededStream
from ifslil.simulator import simulate, stationary_samples


def test_two_state_values():
    kernel, g = two_state_example()
    pi = exact_stationary(kernel)
    np.testing.assert_allclose(pi, [2 / 3, 1 / 3], atol=1e-12)
    assert pi @ g == pytest.approx(0.0, abs=1e-12)
    chi = exact_chi(kernel, g, pi)
    np.testing.assert_allclose(chi, [10 / 3, -20 / 3], atol=1e-10)
    assert exact_sigma2(kernel, g, chi, pi) == pytest.approx(34 / 3, abs=1e-10)
    assert exact_green_kubo(kernel, g, pi) == pytest.approx(34 / 3, abs=1e-10)
    np.testing.assert_allclose(exact_drift(kernel, g, chi), 0.0, atol=1e-12)


def test_reducible_kernel_raises():
    with pytest.raises(ReducibleKernelError):
        exact_stationary(DiscreteKernel(None, np.eye(3)))


def test_kernel_validation():
    with pytest.raises(ValueError):
        DiscreteKernel(None, np.array([[0.5, 0.4], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        DiscreteKernel(None, np.array([[1.1, -0.1], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        DiscreteKernel(None, np.ones((2, 3)) / 3)


def test_uncentered_g_rejected():
    kernel, _ = two_state_example()
    with pytest.raises(ValueError):
        exact_chi(kernel, np.array([1.0, 1.0]))


@st.composite
def doubly_stochastic(draw):
    k = draw(st.integers(2, 6))
    w = draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
    perms = [np.roll(np.eye(k), s, axis=1) for s in range(k)]
    w = np.asarray(w) / np.sum(w)
    return sum(wi * p for wi, p in zip(w, perms))


@given(doubly_stochastic())
def test_doubly_stochastic_has_uniform_law(P):
    pi = exact_stationary(DiscreteKernel(None, P))
    np.testing.assert_allclose(pi, 1.0 / P.shape[0], atol=1e-10)


@st.composite
def positive_kernel(draw):
    k = draw(st.integers(2, 6))
    rows = [draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k)) for _ in range(k)]
    P = np.asarray(rows)
    g = np.asarray(draw(st.lists(st.floats(-3, 3), min_size=k, max_size=k)))
    return P / P.sum(axis=1, keepdims=True), g


@given(positive_kernel())
def test_chi_equals_truncated_series(case):
    P, g = case
    kernel = DiscreteKernel(None, P)
    gc = center(kernel, g)
    chi = exact_chi(kernel, gc)
    series = np.zeros_like(gc)
    v = gc.copy()
    for _ in range(200):
        series += v
        v = P @ v
    scale = 1 + np.abs(gc).max()
    np.testing.assert_allclose(chi, series, atol=1e-8 * scale)
    assert exact_green_kubo(kernel, gc) == pytest.approx(exact_sigma2(kernel, gc, chi), rel=1e-8, abs=1e-10)


def test_two_state_series_sixty_terms():
    kernel, g = two_state_example()
    series = sum(np.linalg.matrix_power(kernel.matrix, i) @ g for i in range(60))
    tail = 0.7 ** 60 / 0.3 * 3
    np.testing.assert_allclose(exact_chi(kernel, g), series, atol=tail)


def test_zero_observable():
    kernel, _ = two_state_example()
    z = np.zeros(2)
    chi = exact_chi(kernel, z)
    assert np.all(chi == 0)
    assert exact_sigma2(kernel, z, chi) == 0.0
    assert exact_green_kubo(kernel, z) == 0.0


@pytest.fixture(scope="module")
def exp_kernels():
    model = builtin_model("exp-contraction")[0]
    return model, discretize(model, points=200), discretize(model, points=400)


def test_discretize_exp_contraction(exp_kernels):
    model, k200, k400 = exp_kernels
    assert k200.defect < 1e-3
    pi = exact_stationary(k400)
    x = k400.states[:, 0]
    samples = stationary_samples(model, 40, 20_000, stream=SeededStream(5, 5))[:, 0]
    assert pi @ x == pytest.approx(samples.mean(), abs=4 * samples.std() / np.sqrt(samples.size) + 0.01)
    # identity observable: sigma^2 stable under grid refinement
    s = []
    for k in (k200, k400):
        xs = k.states[:, 0]
        gc = center(k, xs)
        s.append(exact_sigma2(k, gc, exact_chi(k, gc)))
    assert abs(s[1] - s[0]) / s[1] < 0.01


def test_discretize_rejects_bad_input():
    with pytest.raises(ValueError):
        discretize(builtin_model("exp-contraction")[0], grid=[0.0])
    model = builtin_model("exp-contraction")[0]
    heavy = dataclasses.replace(model, density_p=lambda x, t: 1.01 * model.density_p(x, t))
    with pytest.raises(GridTooCoarseError):
        discretize(heavy, points=20)


def test_embedding_two_state():
    kernel, g = two_state_example()
    model = embed_kernel_as_model(kernel)
    tr = simulate(model, 0.0, 50_000, SeededStream(1, 1))
    x = tr.states[:, 0]
    assert set(np.unique(x)) <= {0.0, 1.0}
    stay = np.mean(x[1:][x[:-1] == 0] == 0)
    assert stay == pytest.approx(0.9, abs=0.01)
    assert np.mean(x == 0) == pytest.approx(2 / 3, abs=0.03)
    obs = kernel_observable(kernel, g)
    assert obs(np.array([[0.0], [1.0]])).tolist() == [1.0, -2.0]
    assert obs.lipschitz_constant == 3.0 and obs.sup_bound == 2.0


def test_embedding_point_mass_row():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    model = embed_kernel_as_model(DiscreteKernel([0.0, 1.0, 2.0], P))
    tr = simulate(model, 0.0, 9, SeededStream(0, 0))
    assert tr.states[:, 0].tolist() == [0, 1, 2] * 3 + [0]


def test_load_kernel_csv(tmp_path):
    f = tmp_path / "k.csv"
    f.write_text("0.9,0.1\n0.2,0.8\n")
    k = load_kernel_csv(f)
    np.testing.assert_array_equal(k.matrix, [[0.9, 0.1], [0.2, 0.8]])
    assert k.states[:, 0].tolist() == [0.0, 1.0]
