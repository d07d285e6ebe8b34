import numpy as np
import pytest

from trail.hsmm import QualityHsmm


def random_model(rng, n=3, E=3, channels=1, spread=1.0):
    """Small model with every parameter drawn at random (zero-diagonal transitions)."""
    pi = rng.dirichlet(np.ones(n))
    A = rng.dirichlet(np.ones(n), size=n) + 1e-3
    np.fill_diagonal(A, 0.0)
    A /= A.sum(axis=1, keepdims=True)
    return QualityHsmm(
        initial_probs=pi,
        transitions=A,
        duration_mean=rng.uniform(0.5, E + 0.5, n),
        duration_var=rng.uniform(0.3, 3.0, n),
        emission_mean=rng.normal(0.0, spread, (n, channels)),
        emission_var=rng.uniform(0.2, 1.5, (n, channels)),
        max_duration=E,
    )


def reference_instance(channels=1):
    """The fixed seeded N=3, E=3, T=6 instance whose oracle values are frozen in the tests."""
    rng = np.random.default_rng(20240611)
    model = random_model(rng, 3, 3, channels)
    z = rng.normal(0.0, 1.0, (6, channels))
    return model, z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
