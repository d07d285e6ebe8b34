"""Trust levels from quality-state posteriors and dwell-time statistics.

A client's trust level is its predicted remaining useful life in rounds: what
is left of its current quality state plus the full expected residence of
every worse state it has yet to pass through. States are 0-based here, 0 the
best and N-1 the terminal (failed) state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trail._io import atomic_write_csv
from trail.errors import InvalidInputError
from trail.hsmm.adapt import MllrTransform, combine_channel_scores, mllr_adapt
from trail.hsmm.inference import forward_batch, log_emission
from trail.hsmm.model import QualityHsmm, as_observations

TRUST_CSV_HEADER = ("round", "client", "state", "dwell", "E_i", "E_bar", "TL")


@dataclass
class HazardCurve:
    """Discrete hazard estimate on intervals ``(k*dt, (k+1)*dt]``.

    ``cdf`` has one more entry than the interval arrays: ``cdf[0] = F(0) = 0``
    and ``cdf[k+1]`` is the failed fraction by the end of interval ``k``.
    ``hazard`` is NaN where nobody is left at risk.
    """

    dt: float
    population: int
    failures: np.ndarray
    at_risk: np.ndarray
    cdf: np.ndarray
    density: np.ndarray
    hazard: np.ndarray

    @property
    def times(self):
        return self.dt * np.arange(len(self.failures))

    @property
    def reliability(self):
        return 1.0 - self.cdf


def empirical_hazard(failure_times, population, dt=1.0, horizon=None) -> HazardCurve:
    """Failures per surviving unit per unit time, interval by interval."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    times = np.asarray(failure_times, dtype=float).reshape(-1)
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise InvalidInputError("failure times must be finite and non-negative")
    if population < len(times):
        raise InvalidInputError("population is smaller than the number of failures")
    if horizon is None:
        horizon = times.max() if times.size else dt
    n_int = max(int(np.ceil(horizon / dt - 1e-12)), 1)
    idx = np.maximum(np.ceil(times / dt - 1e-12).astype(int) - 1, 0)
    idx = idx[idx < n_int]
    failures = np.bincount(idx, minlength=n_int).astype(float)
    cum = np.concatenate([[0.0], np.cumsum(failures)])
    at_risk = population - cum[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        hazard = np.where(at_risk > 0, failures / (at_risk * dt), np.nan)
    return HazardCurve(
        dt=float(dt), population=int(population), failures=failures, at_risk=at_risk,
        cdf=cum / population if population else np.zeros_like(cum),
        density=failures / (population * dt) if population else np.zeros_like(failures),
        hazard=hazard,
    )


def rho(lifespan, mean, var) -> float:
    """Variance weight that makes the residences add up to ``lifespan``."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if lifespan <= 0 or np.any(mean <= 0) or np.any(var < 0):
        raise InvalidInputError("need lifespan > 0, dwell means > 0 and variances >= 0")
    total_var = var.sum()
    if total_var == 0:
        if not np.isclose(lifespan, mean.sum(), rtol=1e-12, atol=1e-12):
            raise InvalidInputError("zero dwell variance requires lifespan == sum of dwell means")
        return 0.0
    with np.errstate(over="ignore"):
        value = float((lifespan - mean.sum()) / total_var)
    if not np.isfinite(value):
        raise InvalidInputError("dwell variances too small to scale onto the lifespan")
    return value


@dataclass(frozen=True)
class DwellStats:
    mean: tuple
    var: tuple
    lifespan: float

    @classmethod
    def from_model(cls, model: QualityHsmm, lifespan) -> "DwellStats":
        m, v = model.dwell_moments()
        return cls(tuple(m.tolist()), tuple(v.tolist()), float(lifespan))

    @property
    def rho(self) -> float:
        return rho(self.lifespan, self.mean, self.var)

    @property
    def num_states(self) -> int:
        return len(self.mean)

    def residences(self) -> np.ndarray:
        return np.array([expected_residence(i, self) for i in range(self.num_states)])


def expected_residence(i, stats: DwellStats) -> float:
    """``m(i) + rho * var(i)``: expected rounds spent in state ``i``."""
    value = stats.mean[i] + stats.rho * stats.var[i]
    if value <= 0:
        raise InvalidInputError(f"state {i} has non-positive expected residence {value:g}")
    return float(value)


def remaining_residence(residence, exit_mass, occupancy):
    """Rounds left in the current state.

    ``exit_mass / occupancy`` is the posterior probability of leaving the
    state next round. Returns ``(value, clamped)``; the value is clamped at 0
    when that ratio exceeds one.
    """
    if occupancy <= 0:
        raise InvalidInputError("state has zero posterior occupancy")
    if exit_mass < 0:
        raise InvalidInputError("exit mass must be non-negative")
    value = residence - residence * exit_mass / occupancy
    if value < 0:
        return 0.0, True
    return float(value), False


def trust_level(i, remaining, residences) -> float:
    """Remaining life in state ``i`` plus full residences of states after it."""
    residences = np.asarray(residences, dtype=float)
    if not 0 <= i < residences.size:
        raise InvalidInputError(f"state {i} out of range")
    return float(remaining + (residences.sum() - residences[: i + 1].sum()))


@dataclass
class TrustRecord:
    client: int | None
    round: int
    state: int
    dwell: int
    occupancy: float
    exit_mass: float
    residence: float
    remaining: float
    trust: float
    clamped: bool = False

    def csv_row(self):
        return (self.round, self.client, self.state, self.dwell,
                repr(self.residence), repr(self.remaining), repr(self.trust))


def _last_round_tables(model, transforms, z):
    """Per-channel (gamma, exit) at the final round, each (S, K, N, E)."""
    gammas, exits = [], []
    for s in range(model.num_channels):
        adapted = mllr_adapt(model, transforms, channel=s)
        logb = log_emission(adapted, z, channel=s)
        alpha, log_norm, b, _ = forward_batch(adapted, logb)
        # at the final round beta is 1, so gamma is alpha and the exit is predictive
        last = alpha[:, -1]
        gammas.append(last)
        exits.append(last * adapted.duration_hazard)
    return np.stack(gammas), np.stack(exits)


def trust_records(model: QualityHsmm, transforms, histories, stats: DwellStats, clients=None, round_index=None):
    """Trust records at the last round of each of ``K`` equal-length histories.

    ``histories`` has shape (K, T, channels).
    """
    z = np.asarray(histories, dtype=float)
    if z.ndim != 3:
        raise InvalidInputError("histories must be (clients, rounds, channels)")
    for row in z:
        as_observations(row, model.num_channels)
    if stats.num_states != model.num_states:
        raise InvalidInputError("dwell statistics and model disagree on the number of states")
    tr = transforms if transforms is not None else MllrTransform.identity(model.num_channels)
    K, T, _ = z.shape
    gam, ext = _last_round_tables(model, tr, z)
    residences = stats.residences()
    records = []
    for k in range(K):
        state_scores = combine_channel_scores([g[k].sum(axis=1) for g in gam])
        i = int(np.argmax(state_scores))
        cell = combine_channel_scores([g[k] for g in gam])
        e = int(np.argmax(cell[i]))
        occupancy = float(cell[i, e])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = [ext[s, k, i, e] / gam[s, k, i, e] if gam[s, k, i, e] > 0 else 1.0
                      for s in range(gam.shape[0])]
        exit_mass = occupancy * float(np.mean(ratios))
        if occupancy > 0:
            remaining, clamped = remaining_residence(residences[i], exit_mass, occupancy)
        else:
            remaining, clamped = 0.0, True
        records.append(TrustRecord(
            client=None if clients is None else int(clients[k]),
            round=T if round_index is None else int(round_index),
            state=i, dwell=e + 1, occupancy=occupancy, exit_mass=exit_mass,
            residence=float(residences[i]), remaining=remaining,
            trust=trust_level(i, remaining, residences), clamped=clamped,
        ))
    return records


def trust_from_history(model: QualityHsmm, transforms, seq, stats: DwellStats, t=None, client=None) -> TrustRecord:
    """Trust record for one client using its observations up to round ``t`` (1-based)."""
    z = as_observations(seq, model.num_channels)
    t = z.shape[0] if t is None else t
    if not 1 <= t <= z.shape[0]:
        raise InvalidInputError(f"round {t} outside 1..{z.shape[0]}")
    clients = None if client is None else [client]
    return trust_records(model, transforms, z[None, :t], stats, clients=clients, round_index=t)[0]


def write_trust_csv(path, records):
    atomic_write_csv(path, TRUST_CSV_HEADER, [r.csv_row() for r in records])
