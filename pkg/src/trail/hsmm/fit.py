"""Baum-Welch training for :class:`QualityHsmm`.

The initial-state, transition and emission updates are closed form. The
dwell-time family (a discretized Gaussian) has no closed-form maximizer, so
its update numerically maximizes the expected complete-data log-likelihood
and is only accepted when it does not decrease that objective. Each
iteration therefore never lowers the data log-likelihood.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from trail.errors import InvalidInputError, NumericalDegeneracyError
from trail.hsmm.inference import backward_batch, forward_batch, log_emission, posteriors_batch
from trail.hsmm.model import QualityHsmm, as_observations, discretized_gaussian_pmf

MIN_VAR = 1e-6


def initial_model(sequences, num_states=3, max_duration=10, min_var=MIN_VAR) -> QualityHsmm:
    """Deterministic starting point for EM.

    Uniform initial and (off-diagonal) transition probabilities; emission
    means and variances from an N-way quantile split of the pooled values of
    each channel, highest values going to state 0; dwell means at half the
    maximum duration with a wide spread.
    """
    seqs = [as_observations(s) for s in sequences]
    if not seqs:
        raise InvalidInputError("need at least one sequence")
    if num_states < 2 or max_duration < 1:
        raise InvalidInputError("need num_states >= 2 and max_duration >= 1")
    pooled = np.concatenate(seqs, axis=0)
    n = num_states
    mean = np.empty((n, pooled.shape[1]))
    var = np.empty_like(mean)
    overall = max(pooled.var(axis=0).max(), min_var)
    for s in range(pooled.shape[1]):
        chunks = np.array_split(np.sort(pooled[:, s])[::-1], n)
        for i, chunk in enumerate(chunks):
            if chunk.size == 0:
                chunk = pooled[:, s]
            mean[i, s] = chunk.mean()
            var[i, s] = max(chunk.var(), overall / n**2, min_var)
    trans = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(trans, 0.0)
    return QualityHsmm(
        initial_probs=np.full(n, 1.0 / n),
        transitions=trans,
        duration_mean=np.full(n, max_duration / 2.0),
        duration_var=np.full(n, max(max_duration**2 / 4.0, 1.0)),
        emission_mean=mean,
        emission_var=var,
        max_duration=max_duration,
    )


class _Stats:
    def __init__(self, n, E, S):
        self.loglik = 0.0
        self.start = np.zeros(n)
        self.trans = np.zeros((n, n))
        self.completed = np.zeros((n, E))  # segments that ended after e rounds
        self.censored = np.zeros((n, E))  # still running after e rounds at sequence end
        self.occ = np.zeros(n)
        self.first = np.zeros((n, S))
        self.second = np.zeros((n, S))


def _group_by_length(seqs):
    groups = {}
    for z in seqs:
        groups.setdefault(z.shape[0], []).append(z)
    return [np.stack(g) for _, g in sorted(groups.items())]


def expectation(model: QualityHsmm, sequences) -> _Stats:
    """Accumulate sufficient statistics and total log-likelihood."""
    n, E, S = model.num_states, model.max_duration, model.num_channels
    st = _Stats(n, E, S)
    for z in _group_by_length(sequences):
        logb = log_emission(model, z)
        alpha, log_norm, b, shift = forward_batch(model, logb)
        beta = backward_batch(model, b, log_norm)
        gamma, xi, _ = posteriors_batch(model, alpha, beta, b, log_norm)
        st.loglik += float(log_norm.sum() + shift.sum())
        st.start += gamma[:, 0, :, 0].sum(axis=0)
        st.trans += xi.sum(axis=(0, 1, 3))
        st.completed += xi.sum(axis=(0, 1, 4))
        st.censored += gamma[:, -1].sum(axis=0)
        occ = gamma.sum(axis=3)  # (k, T, n)
        st.occ += occ.sum(axis=(0, 1))
        st.first += np.einsum("ktn,kts->ns", occ, z)
        st.second += np.einsum("ktn,kts->ns", occ, z**2)
    if st.occ.sum() <= 0 or not np.isfinite(st.loglik):
        raise NumericalDegeneracyError("E-step produced no posterior mass")
    return st


def _duration_objective(mean, var, completed, censored, E):
    pmf = discretized_gaussian_pmf(mean, var, E)[0]
    surv = np.cumsum(pmf[::-1])[::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(completed > 0, completed * np.log(pmf), 0.0)
        terms = terms + np.where(censored > 0, censored * np.log(surv), 0.0)
    val = terms.sum()
    return val if np.isfinite(val) else -np.inf


def _update_duration(mean, var, completed, censored, E, min_var):
    if completed.sum() + censored.sum() <= 0:
        return mean, var
    current = _duration_objective(mean, var, completed, censored, E)
    lo_var = min(min_var, var)
    hi_var = max(100.0 * E**2, var)

    def neg(x):
        v = _duration_objective(x[0], np.exp(x[1]), completed, censored, E)
        return -v if np.isfinite(v) else 1e300

    e = np.arange(1, E + 1)
    w = completed + censored
    start = np.array([(w @ e) / w.sum(), np.log(max(var, lo_var))])
    bounds = [(1.0 - E, 2.0 * E), (np.log(lo_var), np.log(hi_var))]
    best_mean, best_var, best_val = mean, var, current
    for x0 in (np.array([mean, np.log(var)]), start):
        x0 = np.array([np.clip(x0[0], *bounds[0]), np.clip(x0[1], *bounds[1])])
        res = minimize(neg, x0, method="L-BFGS-B", bounds=bounds)
        cand = -float(res.fun)
        if cand > best_val:
            best_mean, best_var, best_val = float(res.x[0]), float(np.exp(res.x[1])), cand
    return best_mean, best_var


def maximization(model: QualityHsmm, st: _Stats, min_var=MIN_VAR) -> QualityHsmm:
    n, E = model.num_states, model.max_duration
    pi = st.start / st.start.sum() if st.start.sum() > 0 else model.initial_probs

    trans = model.transitions.copy()
    rows = st.trans.sum(axis=1)
    for i in range(n):
        if rows[i] > 0:
            trans[i] = st.trans[i] / rows[i]
            trans[i, i] = 0.0

    mu = model.emission_mean.copy()
    var = model.emission_var.copy()
    for i in range(n):
        if st.occ[i] > 0:
            m = st.first[i] / st.occ[i]
            v = st.second[i] / st.occ[i] - m**2
            mu[i] = m
            var[i] = np.maximum(v, np.minimum(min_var, model.emission_var[i]))

    d_mean = model.duration_mean.copy()
    d_var = model.duration_var.copy()
    for i in range(n):
        d_mean[i], d_var[i] = _update_duration(
            d_mean[i], d_var[i], st.completed[i], st.censored[i], E, min_var)

    return QualityHsmm(
        initial_probs=pi, transitions=trans,
        duration_mean=d_mean, duration_var=d_var,
        emission_mean=mu, emission_var=var, max_duration=E,
    )


def baum_welch_fit(init: QualityHsmm, sequences, max_iters=100, tol=1e-6, min_var=MIN_VAR):
    """Fit by EM. Returns ``(model, trace)``.

    ``trace[0]`` is the total log-likelihood of ``init``; ``trace[k]`` the
    value after ``k`` updates. Stops once an update improves the
    log-likelihood by less than ``tol``, or after ``max_iters`` updates.
    """
    if max_iters < 1:
        raise InvalidInputError("max_iters must be >= 1")
    seqs = [as_observations(s, init.num_channels) for s in sequences]
    if not seqs:
        raise InvalidInputError("need at least one sequence")
    model = init
    st = expectation(model, seqs)
    trace = [st.loglik]
    for _ in range(max_iters):
        new = maximization(model, st, min_var)
        new_st = expectation(new, seqs)
        trace.append(new_st.loglik)
        model, improved = new, new_st.loglik - st.loglik
        st = new_st
        if improved < tol:
            break
    return model, np.array(trace)
