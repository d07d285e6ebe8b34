import numpy as np
import pytest

from conftest import random_model
from trail.errors import InvalidInputError
from trail.hsmm import QualityHsmm, baum_welch_fit, initial_model


def two_state_truth():
    return QualityHsmm(
        initial_probs=[0.5, 0.5],
        transitions=[[0.0, 1.0], [1.0, 0.0]],
        duration_mean=[6.0, 4.0],
        duration_var=[2.0, 1.5],
        emission_mean=[[0.8], [0.3]],
        emission_var=[[0.01], [0.01]],
        max_duration=10,
    )


def test_trace_monotone_on_random_fits():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        truth = random_model(rng, n=3, E=5, channels=2, spread=2.0)
        seqs = [truth.sample(40, rng)[0] for _ in range(3)]
        init = initial_model(seqs, num_states=3, max_duration=5)
        _, trace = baum_welch_fit(init, seqs, max_iters=15, tol=1e-8)
        assert np.all(np.diff(trace) >= -1e-9), (seed, np.diff(trace).min())


def test_recovers_emission_means():
    rng = np.random.default_rng(2)
    truth = two_state_truth()
    z, _ = truth.sample(500, rng)
    init = initial_model([z], num_states=2, max_duration=10)
    init = init.replace(emission_mean=init.emission_mean + np.array([[0.05], [-0.05]]))
    model, _ = baum_welch_fit(init, [z], max_iters=100, tol=1e-6)
    order = np.argsort(-model.emission_mean[:, 0])
    np.testing.assert_allclose(model.emission_mean[order, 0], [0.8, 0.3], atol=0.1)
    model.validate()


def test_refit_of_converged_model_is_fixed_point():
    rng = np.random.default_rng(3)
    z, _ = two_state_truth().sample(300, rng)
    model, _ = baum_welch_fit(initial_model([z], 2, 10), [z], max_iters=500, tol=1e-9)
    _, trace = baum_welch_fit(model, [z], max_iters=5, tol=1e-6)
    assert len(trace) == 2
    assert trace[1] - trace[0] < 1e-6


def test_single_round_sequence():
    model, trace = baum_welch_fit(initial_model([[[0.5]]], 2, 3), [[[0.5]]], max_iters=3)
    model.validate()
    assert np.all(np.isfinite(trace))


def test_rejects_empty_input():
    init = initial_model([[[0.1], [0.2]]], 2, 3)
    with pytest.raises(InvalidInputError):
        baum_welch_fit(init, [])
    with pytest.raises(InvalidInputError):
        baum_welch_fit(init, [[[0.1]]], max_iters=0)
