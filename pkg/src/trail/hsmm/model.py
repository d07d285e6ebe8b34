"""Explicit-duration hidden semi-Markov model parameters.

States are quality levels ordered from best (0) to worst (N-1). Each state
has a dwell-time distribution over ``1..max_duration`` rounds, obtained by
discretizing a Gaussian with the state's duration mean/variance onto that
support and renormalizing. Self-transitions are absent from the transition
matrix; staying in a state is governed by the dwell-time distribution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from trail._io import atomic_write_text
from trail.errors import InvalidInputError

FORMAT_VERSION = 1
_NORM_TOL = 1e-12


def discretized_gaussian_pmf(mean, var, max_duration):
    """Dwell-time pmf for each state, shape ``(len(mean), max_duration)``.

    The Gaussian log-density is evaluated at ``e = 1..max_duration`` and
    normalized in log space, so very small variances collapse to a point
    mass instead of underflowing to all zeros.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    e = np.arange(1, max_duration + 1, dtype=float)
    logits = -0.5 * (e[None, :] - mean[:, None]) ** 2 / var[:, None]
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    pmf = np.exp(logp)
    return pmf / pmf.sum(axis=1, keepdims=True)


def as_observations(z, num_channels=None):
    """Coerce ``z`` to a finite ``(T, channels)`` float array."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[0] < 1:
        raise InvalidInputError(f"observations must be a non-empty (T, channels) array, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("observations contain non-finite values")
    if num_channels is not None and z.shape[1] != num_channels:
        raise InvalidInputError(f"observations have {z.shape[1]} channels, model expects {num_channels}")
    return z


@dataclass(eq=False)
class QualityHsmm:
    """Parameter set (initial probs, transitions, emissions, durations).

    Parameters
    ----------
    initial_probs : array, shape (N,)
    transitions : array, shape (N, N)
        Zero diagonal, rows summing to one.
    duration_mean, duration_var : array, shape (N,)
        Location and spread of each state's discretized Gaussian dwell time.
    emission_mean, emission_var : array, shape (N, channels)
        Independent univariate Gaussian per state and channel.
    max_duration : int
        Longest representable dwell, in rounds.
    """

    initial_probs: np.ndarray
    transitions: np.ndarray
    duration_mean: np.ndarray
    duration_var: np.ndarray
    emission_mean: np.ndarray
    emission_var: np.ndarray
    max_duration: int

    def __post_init__(self):
        self.initial_probs = np.array(self.initial_probs, dtype=float)
        self.transitions = np.array(self.transitions, dtype=float)
        self.duration_mean = np.array(self.duration_mean, dtype=float).reshape(-1)
        self.duration_var = np.array(self.duration_var, dtype=float).reshape(-1)
        em = np.array(self.emission_mean, dtype=float)
        ev = np.array(self.emission_var, dtype=float)
        self.emission_mean = em[:, None] if em.ndim == 1 else em
        self.emission_var = ev[:, None] if ev.ndim == 1 else ev
        self.max_duration = int(self.max_duration)
        self.validate()

    def validate(self):
        n = self.initial_probs.shape[0]
        if n < 2:
            raise InvalidInputError("a quality model needs at least two states")
        if self.max_duration < 1:
            raise InvalidInputError("max_duration must be >= 1")
        if self.transitions.shape != (n, n):
            raise InvalidInputError(f"transitions must be {n}x{n}")
        for name in ("duration_mean", "duration_var"):
            if getattr(self, name).shape != (n,):
                raise InvalidInputError(f"{name} must have length {n}")
        if self.emission_mean.shape[0] != n or self.emission_mean.shape != self.emission_var.shape:
            raise InvalidInputError("emission_mean and emission_var must both be (N, channels)")
        arrays = (self.initial_probs, self.transitions, self.duration_mean, self.duration_var,
                  self.emission_mean, self.emission_var)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise InvalidInputError("model parameters must be finite")
        if np.any(self.initial_probs < 0) or abs(self.initial_probs.sum() - 1.0) > _NORM_TOL:
            raise InvalidInputError("initial_probs must be a probability vector")
        if np.any(self.transitions < 0) or np.any(np.abs(self.transitions.sum(axis=1) - 1.0) > _NORM_TOL):
            raise InvalidInputError("every transition row must be a probability vector")
        if np.any(np.diag(self.transitions) != 0):
            raise InvalidInputError("self-transitions must be zero; dwell is modeled by durations")
        if np.any(self.duration_var <= 0) or np.any(self.emission_var <= 0):
            raise InvalidInputError("variances must be positive")

    @property
    def num_states(self) -> int:
        return self.initial_probs.shape[0]

    @property
    def num_channels(self) -> int:
        return self.emission_mean.shape[1]

    @cached_property
    def duration_pmf(self) -> np.ndarray:
        return discretized_gaussian_pmf(self.duration_mean, self.duration_var, self.max_duration)

    @cached_property
    def duration_survival(self) -> np.ndarray:
        """``S_i(e) = P(dwell >= e)``, shape (N, E)."""
        return np.cumsum(self.duration_pmf[:, ::-1], axis=1)[:, ::-1]

    @cached_property
    def duration_hazard(self) -> np.ndarray:
        """P(leave after exactly ``e`` rounds | stayed ``e`` rounds); 1 where unreachable."""
        s = self.duration_survival
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(s > 0, self.duration_pmf / s, 1.0)
        h[:, -1] = 1.0
        return np.clip(h, 0.0, 1.0)

    @cached_property
    def duration_continue(self) -> np.ndarray:
        """P(stay one more round | stayed ``e`` rounds) = S(e+1)/S(e); zero at e = E."""
        s = self.duration_survival
        nxt = np.zeros_like(s)
        nxt[:, :-1] = s[:, 1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, nxt / s, 0.0)

    def dwell_moments(self):
        """Mean and variance of each state's dwell pmf, in rounds."""
        e = np.arange(1, self.max_duration + 1, dtype=float)
        p = self.duration_pmf
        mean = p @ e
        var = p @ e**2 - mean**2
        return mean, np.maximum(var, 0.0)

    def replace(self, **changes) -> "QualityHsmm":
        params = {k: getattr(self, k) for k in (
            "initial_probs", "transitions", "duration_mean", "duration_var",
            "emission_mean", "emission_var", "max_duration")}
        params.update(changes)
        return QualityHsmm(**params)

    def permute_states(self, order) -> "QualityHsmm":
        """Relabel states so that new state ``k`` is old state ``order[k]``."""
        order = np.asarray(order)
        return self.replace(
            initial_probs=self.initial_probs[order],
            transitions=self.transitions[np.ix_(order, order)],
            duration_mean=self.duration_mean[order],
            duration_var=self.duration_var[order],
            emission_mean=self.emission_mean[order],
            emission_var=self.emission_var[order],
        )

    def sample(self, length, rng):
        """Draw ``(observations, states)`` for ``length`` rounds.

        The final segment is cut off at ``length`` (right-censored).
        """
        n, e_max = self.num_states, self.max_duration
        states = np.empty(length, dtype=int)
        t = 0
        state = rng.choice(n, p=self.initial_probs)
        while t < length:
            dwell = 1 + rng.choice(e_max, p=self.duration_pmf[state])
            states[t:t + dwell] = state
            t += dwell
            state = rng.choice(n, p=self.transitions[state])
        noise = rng.standard_normal((length, self.num_channels))
        obs = self.emission_mean[states] + np.sqrt(self.emission_var[states]) * noise
        return obs, states

    def allclose(self, other, rtol=0.0, atol=0.0) -> bool:
        if self.max_duration != other.max_duration:
            return False
        return all(
            getattr(self, k).shape == getattr(other, k).shape
            and np.allclose(getattr(self, k), getattr(other, k), rtol=rtol, atol=atol)
            for k in ("initial_probs", "transitions", "duration_mean", "duration_var",
                      "emission_mean", "emission_var"))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "num_states": self.num_states,
            "max_duration": self.max_duration,
            "pi": self.initial_probs.tolist(),
            "transitions": self.transitions.tolist(),
            "duration_mean": self.duration_mean.tolist(),
            "duration_var": self.duration_var.tolist(),
            "emission_mean": self.emission_mean.tolist(),
            "emission_var": self.emission_var.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QualityHsmm":
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported model format_version {version!r}")
        model = cls(
            initial_probs=data["pi"],
            transitions=data["transitions"],
            duration_mean=data["duration_mean"],
            duration_var=data["duration_var"],
            emission_mean=data["emission_mean"],
            emission_var=data["emission_var"],
            max_duration=data["max_duration"],
        )
        if model.num_states != data["num_states"]:
            raise InvalidInputError("num_states does not match parameter shapes")
        return model

    def save(self, path):
        # json writes floats with repr(), which round-trips every double exactly
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "QualityHsmm":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_model(num_channels=2, num_states=3, max_duration=10):
    """Good/degraded/failed model with channels scaled to [0, 1]."""
    n = num_states
    if n < 2:
        raise InvalidInputError("need at least two states")
    trans = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(trans, 0.0)
    levels = np.linspace(0.9, 0.2, n)
    return QualityHsmm(
        initial_probs=np.full(n, 1.0 / n),
        transitions=trans,
        duration_mean=np.full(n, max_duration / 2.0),
        duration_var=np.full(n, max_duration**2 / 4.0),
        emission_mean=np.repeat(levels[:, None], num_channels, axis=1),
        emission_var=np.full((n, num_channels), 0.01),
        max_duration=max_duration,
    )
