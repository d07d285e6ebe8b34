"""Forward/backward inference on the (state, elapsed dwell) lattice.

Lattice cell ``(i, e)`` at round ``t`` means: the hidden state is ``i`` and it
has been occupied for the last ``e`` rounds, ``t-e+1 .. t``. One emission
factor is absorbed per round. A segment that has lasted ``e`` rounds ends with
the duration hazard ``p_i(e) / S_i(e)``, and continues with ``S_i(e+1) / S_i(e)``,
so the dwell pmf is charged exactly once, when the segment completes. The last
segment of a sequence may still be running (right-censored), which makes
``sum_{i,e} alpha_T(i, e)`` the sequence likelihood.

Forward and backward tables are stored scale-normalized per round.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trail.errors import InvalidInputError, NumericalDegeneracyError
from trail.hsmm.model import QualityHsmm, as_observations

UNDERFLOW_DENSITY = 1e-300
_LOG_UNDERFLOW = np.log(UNDERFLOW_DENSITY)
_LOG_2PI = np.log(2.0 * np.pi)


def log_emission(model: QualityHsmm, z, channel=None):
    """Per-round, per-state emission log-density, shape ``(..., T, N)``.

    ``channel=None`` multiplies all channels; an int selects one.
    """
    z = np.asarray(z, dtype=float)
    mu, var = model.emission_mean, model.emission_var
    if channel is not None:
        if not 0 <= channel < model.num_channels:
            raise InvalidInputError(f"channel {channel} out of range for {model.num_channels} channels")
        mu, var = mu[:, channel:channel + 1], var[:, channel:channel + 1]
        z = z[..., channel:channel + 1]
    diff = z[..., None, :] - mu
    return -0.5 * (_LOG_2PI + np.log(var) + diff**2 / var).sum(axis=-1)


@dataclass
class DurationLattice:
    """Scaled forward (and optionally backward) tables for one sequence.

    ``alpha[t]`` sums to one over ``(i, e)``. ``log_scale[t]`` is the log of the
    round-``t`` normalizer, so ``loglik = log_scale.sum()``. ``beta`` is scaled
    so that ``alpha[t] * beta[t]`` sums to one for every round.
    """

    alpha: np.ndarray
    log_scale: np.ndarray
    beta: np.ndarray | None = None
    # per-round shift applied to emission log-densities before exponentiating
    emission_shift: np.ndarray | None = None
    emission: np.ndarray | None = None

    @property
    def loglik(self) -> float:
        return float(self.log_scale.sum())

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def length(self) -> int:
        return self.alpha.shape[0]


@dataclass
class PosteriorTables:
    """Smoothed posteriors for one sequence.

    gamma : (T, N, E)
        P(state i with elapsed dwell e at round t | all observations).
    xi : (T-1, N, E, N)
        P(at round t in (i, e), a new segment of state j starts at t+1 | all
        observations). Zero whenever i == j.
    exit_next : (N, E, N)
        Predictive version of ``xi`` for the round after the last observation.
    """

    gamma: np.ndarray
    xi: np.ndarray
    exit_next: np.ndarray

    @property
    def state_marginals(self) -> np.ndarray:
        return self.gamma.sum(axis=2)

    def exit_mass(self, t):
        """Total exit posterior ``sum_j xi_t(i, e, j)`` at 0-based round ``t``; (N, E)."""
        if t == self.gamma.shape[0] - 1:
            return self.exit_next.sum(axis=2)
        return self.xi[t].sum(axis=2)

    def transition_counts(self) -> np.ndarray:
        """Expected number of i -> j segment changes inside the sequence."""
        return self.xi.sum(axis=(0, 2))


def _check_underflow(logb):
    shift = logb.max(axis=-1)
    bad = shift < _LOG_UNDERFLOW
    if np.any(bad):
        t = int(np.argwhere(bad)[0][-1])
        raise NumericalDegeneracyError(
            f"all emission densities fall below {UNDERFLOW_DENSITY:g} at round {t + 1}", timestep=t + 1)
    return shift


def _shifted_emission(logb):
    """Exponentiate with a per-round shift; rejects rounds where nothing is plausible."""
    shift = _check_underflow(logb)
    return np.exp(logb - shift[..., None]), shift


def forward_batch(model: QualityHsmm, logb):
    """Scaled forward pass over ``K`` equal-length sequences.

    ``logb`` has shape (K, T, N). Returns ``(alpha, log_norm, b, shift)`` where
    ``log_norm`` holds the normalizers of the shifted emissions.
    """
    k, T, n = logb.shape
    E = model.max_duration
    b, shift = _shifted_emission(logb)
    hz, cont = model.duration_hazard, model.duration_continue
    A = model.transitions
    alpha = np.zeros((k, T, n, E))
    log_norm = np.empty((k, T))

    cur = np.zeros((k, n, E))
    cur[:, :, 0] = model.initial_probs * b[:, 0]
    for t in range(T):
        if t > 0:
            prev = alpha[:, t - 1]
            enter = (prev * hz).sum(axis=2) @ A
            cur = np.empty((k, n, E))
            cur[:, :, 0] = enter
            cur[:, :, 1:] = prev[:, :, :-1] * cont[:, :-1]
            cur *= b[:, t, :, None]
        c = cur.sum(axis=(1, 2))
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise NumericalDegeneracyError(f"forward probability vanished at round {t + 1}", timestep=t + 1)
        alpha[:, t] = cur / c[:, None, None]
        log_norm[:, t] = np.log(c)
    return alpha, log_norm, b, shift


def backward_batch(model: QualityHsmm, b, log_norm):
    """Scaled backward pass matching :func:`forward_batch`'s normalizers."""
    k, T, n = b.shape
    E = model.max_duration
    hz, cont = model.duration_hazard, model.duration_continue
    A = model.transitions
    norm = np.exp(log_norm)
    beta = np.empty((k, T, n, E))
    beta[:, T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        bt = b[:, t + 1] / norm[:, t + 1, None]
        start = (bt * nxt[:, :, 0]) @ A.T
        cur = np.empty((k, n, E))
        cur[:, :, :-1] = cont[:, :-1] * (bt[:, :, None] * nxt[:, :, 1:])
        cur[:, :, -1] = 0.0
        cur += hz * start[:, :, None]
        beta[:, t] = cur
    return beta


def posteriors_batch(model: QualityHsmm, alpha, beta, b, log_norm):
    gamma = alpha * beta
    k, T, n, E = alpha.shape
    hz, A = model.duration_hazard, model.transitions
    if T > 1:
        bt = b[:, 1:] / np.exp(log_norm[:, 1:, None])  # (k, T-1, n)
        entry = bt * beta[:, 1:, :, 0]  # (k, T-1, n)
        xi = (alpha[:, :-1] * hz)[..., None] * A[:, None, :] * entry[:, :, None, None, :]
    else:
        xi = np.zeros((k, 0, n, E, n))
    exit_next = (gamma[:, -1] * hz)[..., None] * A[:, None, :]
    return gamma, xi, exit_next


def _prepare(model, seq, channel):
    z = as_observations(seq, model.num_channels)
    return z, log_emission(model, z, channel)


def forward_pass(model: QualityHsmm, seq, channel=None) -> DurationLattice:
    """Scaled forward lattice for one observation sequence.

    ``channel`` selects one observation channel; ``None`` uses all of them.
    """
    _, logb = _prepare(model, seq, channel)
    alpha, log_norm, b, shift = forward_batch(model, logb[None])
    return DurationLattice(alpha=alpha[0], log_scale=log_norm[0] + shift[0],
                           emission_shift=shift[0], emission=b[0])


def sequence_likelihood(lattice: DurationLattice) -> float:
    """Log-probability of the sequence, the sum of the per-round log normalizers."""
    return lattice.loglik


def backward_pass(model: QualityHsmm, seq, log_scale, channel=None) -> np.ndarray:
    """Backward table scaled by the forward pass's ``log_scale``."""
    _, logb = _prepare(model, seq, channel)
    log_scale = np.asarray(log_scale, dtype=float)
    if log_scale.shape != (logb.shape[0],):
        raise InvalidInputError("scale constants do not match the sequence length")
    b, shift = _shifted_emission(logb)
    return backward_batch(model, b[None], (log_scale - shift)[None])[0]


def smooth(model: QualityHsmm, seq, channel=None) -> DurationLattice:
    """Forward lattice with the matching backward table filled in."""
    lat = forward_pass(model, seq, channel)
    lat.beta = backward_batch(model, lat.emission[None], (lat.log_scale - lat.emission_shift)[None])[0]
    return lat


def posteriors(model: QualityHsmm, seq, alpha=None, beta=None, channel=None) -> PosteriorTables:
    """State/dwell and transition posteriors.

    ``alpha``/``beta`` may be passed as a :class:`DurationLattice` (from
    :func:`smooth`) in ``alpha``; otherwise both passes are run here.
    """
    if isinstance(alpha, DurationLattice):
        lat = alpha
        if lat.beta is None:
            raise InvalidInputError("lattice has no backward table; use smooth()")
    elif alpha is None and beta is None:
        lat = smooth(model, seq, channel)
    else:
        raise InvalidInputError("pass a smoothed DurationLattice, or neither table")
    z = as_observations(seq, model.num_channels)
    if lat.alpha.shape != (z.shape[0], model.num_states, model.max_duration):
        raise InvalidInputError("lattice shape does not match model and sequence")
    gamma, xi, exit_next = posteriors_batch(
        model, lat.alpha[None], lat.beta[None], lat.emission[None],
        (lat.log_scale - lat.emission_shift)[None])
    return PosteriorTables(gamma=gamma[0], xi=xi[0], exit_next=exit_next[0])


@dataclass
class ViterbiPath:
    states: np.ndarray
    segments: list  # (state, duration) pairs in time order
    log_prob: float


def viterbi_decode(model: QualityHsmm, seq, channel=None) -> ViterbiPath:
    """Most probable segmentation and its joint log-probability with the data."""
    _, logb = _prepare(model, seq, channel)
    T, n = logb.shape
    E = model.max_duration
    with np.errstate(divide="ignore"):
        log_hz = np.log(model.duration_hazard)
        log_cont = np.log(model.duration_continue)
        log_a = np.log(model.transitions)
        log_pi = np.log(model.initial_probs)
    _check_underflow(logb)

    delta = np.full((n, E), -np.inf)
    delta[:, 0] = log_pi + logb[0]
    back = np.zeros((T, n, 2), dtype=int)
    for t in range(1, T):
        leave = delta + log_hz  # (n, E)
        flat = leave.reshape(-1)
        cand = flat[:, None] + np.repeat(log_a, E, axis=0)  # (n*E, n)
        best = np.argmax(cand, axis=0)
        new = np.full((n, E), -np.inf)
        new[:, 0] = cand[best, np.arange(n)]
        back[t, :, 0], back[t, :, 1] = np.divmod(best, E)
        new[:, 1:] = delta[:, :-1] + log_cont[:, :-1]
        delta = new + logb[t][:, None]

    i, e = np.unravel_index(int(np.argmax(delta)), delta.shape)
    log_prob = float(delta[i, e])
    if not np.isfinite(log_prob):
        raise NumericalDegeneracyError("no segmentation has positive probability", timestep=T)
    states = np.empty(T, dtype=int)
    segments = []
    t = T - 1
    while t >= 0:
        dwell = e + 1
        states[t - dwell + 1:t + 1] = i
        segments.append((int(i), int(dwell)))
        start = t - dwell + 1
        if start == 0:
            break
        i, e = back[start, i]
        t = start - 1
    segments.reverse()
    return ViterbiPath(states=states, segments=segments, log_prob=log_prob)
