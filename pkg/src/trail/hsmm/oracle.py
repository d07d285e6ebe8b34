"""Exact answers by enumerating every (state, duration) segmentation.

Used as the reference for the lattice algorithms on small instances. It shares
nothing with them except the model's dwell pmf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from trail.errors import SizeLimitError
from trail.hsmm.model import QualityHsmm, as_observations

ENUMERATION_LIMIT = 10**7


@dataclass
class OracleResult:
    loglik: float
    state_marginals: np.ndarray  # (T, N)
    dwell_marginals: np.ndarray  # (T, N, E), elapsed dwell
    transition_counts: np.ndarray  # (N, N), expected segment changes
    best_segments: list
    best_log_prob: float
    num_segmentations: int


def count_segmentations(num_states, max_duration, length):
    """Number of legal segmentations of ``length`` rounds."""
    # ways[t] = number of labelled segmentations covering the first t rounds
    ways = [0] * (length + 1)
    for t in range(1, length + 1):
        for d in range(1, min(max_duration, t) + 1):
            ways[t] += num_states if t == d else ways[t - d] * (num_states - 1)
    return ways[length]


def _segmentations(n, E, T):
    """Yield lists of (state, duration) covering T rounds, adjacent states distinct."""
    def rec(remaining, prev):
        if remaining == 0:
            yield []
            return
        for s in range(n):
            if s == prev:
                continue
            for d in range(1, min(E, remaining) + 1):
                for rest in rec(remaining - d, s):
                    yield [(s, d)] + rest
    yield from rec(T, -1)


def brute_force_likelihood(model: QualityHsmm, seq, channel=None, limit=ENUMERATION_LIMIT) -> OracleResult:
    z = as_observations(seq, model.num_channels)
    T, n, E = z.shape[0], model.num_states, model.max_duration
    total = count_segmentations(n, E, T)
    if total > limit:
        raise SizeLimitError(f"{total} segmentations of length {T} exceed the enumeration limit {limit}")

    channels = range(model.num_channels) if channel is None else [channel]
    logb = np.zeros((T, n))
    for s in channels:
        logb += norm.logpdf(z[:, s][:, None], loc=model.emission_mean[:, s],
                            scale=np.sqrt(model.emission_var[:, s]))
    with np.errstate(divide="ignore"):
        log_pmf = np.log(model.duration_pmf)
        log_surv = np.log(np.cumsum(model.duration_pmf[:, ::-1], axis=1)[:, ::-1])
        log_a = np.log(model.transitions)
        log_pi = np.log(model.initial_probs)

    weights, segs = [], []
    for seg in _segmentations(n, E, T):
        lw = log_pi[seg[0][0]]
        t = 0
        for k, (s, d) in enumerate(seg):
            lw += logb[t:t + d, s].sum()
            last = k == len(seg) - 1
            lw += log_surv[s, d - 1] if last else log_pmf[s, d - 1] + log_a[s, seg[k + 1][0]]
            t += d
        weights.append(lw)
        segs.append(seg)
    weights = np.array(weights)
    loglik = float(logsumexp(weights))
    post = np.exp(weights - loglik)

    state_marg = np.zeros((T, n))
    dwell_marg = np.zeros((T, n, E))
    trans = np.zeros((n, n))
    for w, seg in zip(post, segs):
        t = 0
        for k, (s, d) in enumerate(seg):
            for off in range(d):
                state_marg[t + off, s] += w
                dwell_marg[t + off, s, off] += w
            if k + 1 < len(seg):
                trans[s, seg[k + 1][0]] += w
            t += d

    best = int(np.argmax(weights))
    return OracleResult(
        loglik=loglik,
        state_marginals=state_marg,
        dwell_marginals=dwell_marg,
        transition_counts=trans,
        best_segments=segs[best],
        best_log_prob=float(weights[best]),
        num_segmentations=len(segs),
    )
