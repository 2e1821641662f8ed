"""
Shared fixtures: seeded generators and small masked datasets
"""
import numpy as np
import pytest

from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.fit_model import EmOptions
from envelope_em.services.simulation_service import ScenarioSpec, gen_parameters, simulate_dataset


def random_spd(rng: np.random.Generator, dim: int, jitter: float = 0.5) -> np.ndarray:
    root = rng.standard_normal((dim, dim))
    return root @ root.T + jitter * np.eye(dim)


def random_masked_dataset(rng: np.random.Generator, n: int = 200, p: int = 2, r: int = 4,
                          rate: float = 0.15) -> ObservedDataset:
    """Joint-normal data with cells deleted completely at random; no row loses every cell."""
    beta = rng.uniform(-2.0, 2.0, size=(r, p))
    x = rng.multivariate_normal(rng.uniform(-1.0, 1.0, size=p), random_spd(rng, p), size=n)
    y = x @ beta.T + rng.multivariate_normal(np.zeros(r), random_spd(rng, r), size=n)
    observed = rng.random((n, p + r)) > rate
    observed[~observed.any(axis=1), 0] = True
    return ObservedDataset.from_arrays(
        np.where(observed[:, :p], x, np.nan), np.where(observed[:, p:], y, np.nan),
        x_observed=observed[:, :p], y_observed=observed[:, p:])


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture
def small_spec():
    return ScenarioSpec(name="small", n=200, r=4, p=2, u=1, omega_scale=0.5, omega0_scale=50.0,
                        reps=2, seed=11, selection="fixed", pilot_n=2000)


@pytest.fixture
def small_sample(small_spec):
    return simulate_dataset(small_spec, replicate=0)


@pytest.fixture
def small_params(small_spec):
    return gen_parameters(small_spec)


@pytest.fixture
def masked_dataset(rng):
    return random_masked_dataset(rng)


@pytest.fixture
def em_options():
    return EmOptions(tol=1e-8, max_iter=300)


@pytest.fixture
def make_masked():
    return random_masked_dataset


@pytest.fixture
def make_spd():
    return random_spd
