import numpy as np
import pytest

from conftest import random_model, reference_instance
from trail.errors import InvalidInputError
from trail.hsmm import (
    MllrTransform, brute_force_likelihood, forward_pass, map_state_estimate, mllr_adapt, posteriors,
)


def test_identity_is_noop(rng):
    model = random_model(rng, channels=2)
    assert mllr_adapt(model, MllrTransform.identity(2)).allclose(model)


def test_duration_scale_doubles_means(rng):
    model = random_model(rng, channels=2)
    tr = MllrTransform((1.0, 1.0), (0.0, 0.0), (2.0, 2.0), (0.0, 0.0))
    np.testing.assert_array_equal(mllr_adapt(model, tr).duration_mean, 2 * model.duration_mean)
    np.testing.assert_array_equal(mllr_adapt(model, tr).duration_var, model.duration_var)


def test_duration_map_is_affine_per_channel(rng):
    model = random_model(rng, channels=2)
    tr = MllrTransform((1.0, 1.0), (0.0, 0.0), (2.0, 0.5), (1.0, -0.25))
    np.testing.assert_array_equal(mllr_adapt(model, tr, channel=1).duration_mean, 0.5 * model.duration_mean - 0.25)
    with pytest.raises(InvalidInputError):
        mllr_adapt(model, tr)  # channels disagree and none was chosen


def test_nonpositive_duration_scale_rejected():
    with pytest.raises(InvalidInputError):
        MllrTransform((1.0,), (0.0,), (0.0,), (0.0,))


def test_mean_shift_construction():
    model, z = reference_instance(channels=2)
    shift = np.array([0.7, -1.3])
    tr = MllrTransform((1.0, 1.0), tuple(shift), (1.0, 1.0), (0.0, 0.0))
    adapted = mllr_adapt(model, tr)
    assert forward_pass(adapted, z + shift).loglik == pytest.approx(forward_pass(model, z).loglik, rel=1e-12)


def test_single_channel_map_is_posterior_argmax():
    model, z = reference_instance()
    for t in range(1, 7):
        state, scores = map_state_estimate(model, None, z, t)
        marg = posteriors(model, z).state_marginals[t - 1]
        assert state == int(np.argmax(marg))
        np.testing.assert_allclose(scores, marg, atol=1e-12)


def test_duplicated_channel_gives_same_state():
    model, z = reference_instance()
    twin = model.replace(emission_mean=np.repeat(model.emission_mean, 2, axis=1),
                         emission_var=np.repeat(model.emission_var, 2, axis=1))
    for t in range(1, 7):
        assert map_state_estimate(twin, None, np.repeat(z, 2, axis=1), t)[0] == map_state_estimate(model, None, z, t)[0]


def test_two_channel_map_matches_per_channel_oracle():
    model, z = reference_instance(channels=2)
    tr = MllrTransform((1.0, 0.9), (0.0, 0.1), (1.0, 1.5), (0.0, -0.2))
    for t in range(1, 7):
        exact = np.ones(3)
        for s in range(2):
            exact *= brute_force_likelihood(mllr_adapt(model, tr, channel=s), z, channel=s).state_marginals[t - 1]
        exact /= exact.sum()
        state, scores = map_state_estimate(model, tr, z, t)
        np.testing.assert_allclose(scores, exact, atol=1e-9)
        assert state == int(np.argmax(exact))


def test_round_out_of_range():
    model, z = reference_instance()
    with pytest.raises(InvalidInputError):
        map_state_estimate(model, None, z, 0)
    with pytest.raises(InvalidInputError):
        map_state_estimate(model, None, z, 7)
