"""Built-in models, each paired with a bounded Lipschitz observable.

Closed-form contraction integrals are recorded under ``model.analytic`` where
they exist: ``analytic["a"](j)`` gives ``sup_x int lambda^j p dt``.
"""
from __future__ import annotations

import numpy as np

from .model import ModelSpec, NoiseSpec, ObservableSpec

TILT = 0.5


def _uniform_sampler(T: float):
    def sample(x, u):
        return T * u
    return sample


def _tanh_obs(offset: float = 0.0) -> ObservableSpec:
    return ObservableSpec(lambda x: np.tanh(x[:, 0] - offset), 1.0, 1.0,
                          name=f"tanh(x-{offset:g})" if offset else "tanh(x)")


def exp_contraction(epsilon: float = 0.1):
    """``S(x,t) = exp(-t) x`` with uniform times on [0, 1]."""
    model = ModelSpec(
        name="exp-contraction", dimension=1, T=1.0, epsilon_star=max(0.1, epsilon),
        noise=NoiseSpec(epsilon, "uniform-ball" if epsilon > 0 else "point-mass-zero"),
        map_S=lambda x, t: np.exp(-t)[:, None] * x,
        density_p=lambda x, t: np.ones_like(t),
        lipschitz_lambda=lambda x, t: np.exp(-t),
        audit_window=((-2.0,), (2.0,)),
        density_free_of_x=True, sampler=_uniform_sampler(1.0),
        description="linear contraction by a uniformly distributed factor exp(-t)",
        analytic={"a": lambda j: (1.0 - np.exp(-j)) / j},
    )
    return model, _tanh_obs()


def affine_uniform(epsilon: float = 0.0):
    """``S(x,t) = x/2 + t``; the stationary law is that of sum 2^-k t_k."""
    model = ModelSpec(
        name="affine-uniform", dimension=1, T=1.0, epsilon_star=epsilon,
        noise=NoiseSpec(epsilon, "uniform-ball" if epsilon > 0 else "point-mass-zero"),
        map_S=lambda x, t: 0.5 * x + t[:, None],
        density_p=lambda x, t: np.ones_like(t),
        lipschitz_lambda=lambda x, t: np.full_like(t, 0.5),
        audit_window=((-1.0,), (3.0,)),
        density_free_of_x=True, sampler=_uniform_sampler(1.0),
        description="affine contraction with additive uniform drift",
        analytic={"a": lambda j: 0.5 ** j, "stationary_mean": 1.0},
    )
    return model, _tanh_obs(1.0)


def _tilted_density(x, t):
    tau = np.tanh(x[:, 0])
    return (1.0 + TILT * t * tau) / (1.0 + 0.5 * TILT * tau)


def tilted_density(epsilon: float = 0.1):
    """Exponential contraction whose time density leans on ``tanh(x)``."""
    model = ModelSpec(
        name="tilted-density", dimension=1, T=1.0, epsilon_star=max(0.1, epsilon),
        noise=NoiseSpec(epsilon, "uniform-ball" if epsilon > 0 else "point-mass-zero"),
        map_S=lambda x, t: np.exp(-t)[:, None] * x,
        density_p=_tilted_density,
        lipschitz_lambda=lambda x, t: np.exp(-t),
        audit_window=((-2.0,), (2.0,)),
        description="p(x,t) = (1 + k t tanh x) / (1 + k tanh(x)/2), k = 1/2",
        analytic={
            # interval bound on the tilt: numerator >= 1-k, denominator <= 1+k/2
            "density_lower_bound": (1.0 - TILT) / (1.0 + 0.5 * TILT),
            # sup_x int |d p / dx| dt
            "dini_lipschitz": 0.25 * TILT / (1.0 - 0.5 * TILT) ** 2,
        },
    )
    return model, _tanh_obs()


def _cell_density(x, t):
    return 1.0 + TILT * np.tanh(x[:, 0] - 1.0) * (1.0 - 2.0 * t)


def cell_cycle_like(epsilon: float = 0.05):
    """Grow-then-halve map with size-dependent division times.

    A representative contracting model in the spirit of cell-cycle
    iterations; not a reproduction of any published parameterization.
    """
    model = ModelSpec(
        name="cell-cycle-like", dimension=1, T=1.0, epsilon_star=max(0.05, epsilon),
        noise=NoiseSpec(epsilon, "uniform-ball" if epsilon > 0 else "point-mass-zero"),
        map_S=lambda x, t: (0.5 * np.exp(0.5 * t))[:, None] * (x + t[:, None]),
        density_p=_cell_density,
        lipschitz_lambda=lambda x, t: 0.5 * np.exp(0.5 * t),
        audit_window=((-1.0,), (3.0,)),
        description="S(x,t) = exp(t/2)(x+t)/2, larger cells divide earlier",
    )
    return model, _tanh_obs(1.0)


def iid_uniform(epsilon: float = 0.0):
    """``S(x,t) = t - 1/2``: the chain forgets its state in one step."""
    model = ModelSpec(
        name="iid-uniform", dimension=1, T=1.0, epsilon_star=epsilon,
        noise=NoiseSpec(epsilon, "uniform-ball" if epsilon > 0 else "point-mass-zero"),
        map_S=lambda x, t: np.broadcast_to((t - 0.5)[:, None], x.shape).copy(),
        density_p=lambda x, t: np.ones_like(t),
        lipschitz_lambda=lambda x, t: np.zeros_like(t),
        audit_window=((-1.0,), (1.0,)),
        density_free_of_x=True, sampler=_uniform_sampler(1.0),
        description="state-independent map (lambda = 0)",
        analytic={"a": lambda j: 0.0},
    )
    return model, ObservableSpec(lambda x: x[:, 0], 1.0, 1.0, name="x")


def expanding(epsilon: float = 0.0):
    """Negative control: ``S(x,t) = 1.1 x`` violates the contraction condition."""
    model = ModelSpec(
        name="expanding", dimension=1, T=1.0, epsilon_star=epsilon,
        noise=NoiseSpec(epsilon, "uniform-ball" if epsilon > 0 else "point-mass-zero"),
        map_S=lambda x, t: 1.1 * x,
        density_p=lambda x, t: np.ones_like(t),
        lipschitz_lambda=lambda x, t: np.full_like(t, 1.1),
        audit_window=((-1.0,), (1.0,)),
        density_free_of_x=True, sampler=_uniform_sampler(1.0),
        description="expanding linear map",
        analytic={"a": lambda j: 1.1 ** j},
    )
    return model, _tanh_obs()


def unnormalized(epsilon: float = 0.0):
    """Negative control: density ``p = 2`` integrates to 2."""
    model, obs = exp_contraction(epsilon)
    from dataclasses import replace
    return replace(model, name="unnormalized", density_p=lambda x, t: np.full_like(t, 2.0),
                   sampler=None, analytic={}), obs


_REGISTRY = {
    "exp-contraction": (exp_contraction, True),
    "affine-uniform": (affine_uniform, True),
    "tilted-density": (tilted_density, True),
    "cell-cycle-like": (cell_cycle_like, True),
    "iid-uniform": (iid_uniform, True),
    "expanding": (expanding, False),
    "unnormalized": (unnormalized, False),
}

PASSING_BUILTINS = tuple(k for k, (_, ok) in _REGISTRY.items() if ok)
CORE_BUILTINS = ("exp-contraction", "affine-uniform", "tilted-density", "cell-cycle-like")


def builtin_names() -> list[str]:
    return list(_REGISTRY)


def builtin_model(name: str, **params):
    """Look up a built-in ``(ModelSpec, ObservableSpec)`` pair by name.

    Keyword parameters (currently only ``epsilon``) override the defaults.
    """
    try:
        factory, _ = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {', '.join(_REGISTRY)}") from None
    return factory(**params)
