import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifslil.audit import (audit, audit_grid, check_normalization, density_bounds, dini_probe,
                          estimate_a_j, estimate_c)
from ifslil.registry import PASSING_BUILTINS, builtin_model
from ifslil.rng import SeededStream


@pytest.fixture(scope="module")
def exp():
    return builtin_model("exp-contraction")[0]


def test_a_j_closed_forms(exp):
    assert estimate_a_j(exp, 1) == pytest.approx(1 - math.exp(-1), abs=1e-6)
    assert estimate_a_j(exp, 2) == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-6)
    affine = builtin_model("affine-uniform")[0]
    assert estimate_a_j(affine, 2.5) == pytest.approx(0.5 ** 2.5, abs=1e-12)


@pytest.mark.parametrize("name", PASSING_BUILTINS)
def test_quadrature_refinement_stable(name):
    m = builtin_model(name)[0]
    for j in (1.0, 2.0, 2.0 + m.delta):
        assert abs(estimate_a_j(m, j, nodes=64) - estimate_a_j(m, j, nodes=256)) < 1e-8


@pytest.mark.parametrize("name", ["exp-contraction", "tilted-density", "cell-cycle-like"])
def test_a_j_monotone_in_grid(name):
    m = builtin_model(name)[0]
    coarse = audit_grid(m, 11)
    fine = np.vstack([coarse, audit_grid(m, 101)])
    assert estimate_a_j(m, 2.0, fine) >= estimate_a_j(m, 2.0, coarse)


def test_normalization(exp):
    assert check_normalization(exp) < 1e-10
    assert check_normalization(builtin_model("tilted-density")[0]) < 1e-8
    assert check_normalization(builtin_model("unnormalized")[0]) == pytest.approx(1.0, abs=1e-10)


def test_estimate_c(exp):
    assert estimate_c(exp) == pytest.approx(0.1, abs=1e-15)
    assert estimate_c(builtin_model("affine-uniform")[0]) == pytest.approx(1.0, abs=1e-12)
    # point-mass noise with S fixing the base point leaves only epsilon_star
    still = builtin_model("exp-contraction", epsilon=0.0)[0]
    assert still.noise.law == "point-mass-zero"
    assert estimate_c(still) == still.epsilon_star


def test_density_bounds(exp):
    assert density_bounds(exp) == (1.0, 1.0)
    tilted = builtin_model("tilted-density")[0]
    m1, m2 = density_bounds(tilted)
    # (1 + t tanh(x) / 2) / (1 + tanh(x) / 4) lies in [1/2 / (5/4), 3/2 / (3/4)]
    assert m1 >= tilted.analytic["density_lower_bound"] == pytest.approx(0.4)
    assert m2 <= 2.0


def test_dini_probe(exp):
    samples = dini_probe(exp, 120, SeededStream(0, 1))
    assert len(samples) == 120
    assert all(v == 0.0 for _, v in samples)
    tilted = builtin_model("tilted-density")[0]
    samples = dini_probe(tilted, 120, SeededStream(0, 1))
    r = np.array(samples)
    assert r[:, 0].min() >= 1e-4 * 0.999 and r[:, 0].max() <= 1.0 + 1e-12
    # mean-value bound: gap <= sup_x int |dp/dx| dt * rho
    assert np.all(r[:, 1] <= tilted.analytic["dini_lipschitz"] * r[:, 0] * (1 + 1e-9) + 1e-15)


def test_audit_reports(exp):
    rep = audit(exp)
    assert rep.ok
    assert rep.constants.a_2pd == pytest.approx((1 - math.exp(-2.5)) / 2.5, abs=1e-6)
    d = rep.to_dict()
    assert {"constants", "pass", "grid_spec", "dini_samples"} <= set(d)
    assert not audit(builtin_model("expanding")[0]).passed["II"]
    assert not audit(builtin_model("unnormalized")[0]).passed["I"]


@pytest.mark.parametrize("name", PASSING_BUILTINS)
def test_passing_builtins_pass(name):
    rep = audit(builtin_model(name)[0])
    assert rep.ok, rep.notes
    c = rep.constants
    assert c.a_2pd < 1 and c.M1 > 0 and c.normalization_defect < 1e-6


@given(st.sampled_from(PASSING_BUILTINS), st.floats(0.05, 1.0))
def test_hoelder_chain(name, delta):
    from dataclasses import replace
    m = replace(builtin_model(name)[0], delta=delta)
    a1, a2, a2pd = (estimate_a_j(m, j) for j in (1.0, 2.0, 2.0 + delta))
    assert a1 <= a2pd ** (1 / (2 + delta)) + 1e-6
    assert a2 <= a2pd ** (2 / (2 + delta)) + 1e-6
