"""Client-to-server association.

An association is a binary ``(clients, servers)`` matrix ``d``: each client
sits on at most one server, each server takes at most ``capacity`` clients,
and a client may only sit on a server where its trust level clears the
threshold. Assignments are scored with the convergence-bound error term
``B`` (lower is better), and the bound itself is available for plotting.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from trail.errors import InvalidInputError, SizeLimitError

EXHAUSTIVE_LIMIT = 10**7


@dataclass
class SchedulingInstance:
    """Sizes ``n_i``, trust matrix ``TL[i, s]``, threshold and per-server capacity."""

    sizes: np.ndarray
    trust: np.ndarray
    threshold: float = 0.0
    capacity: int | None = None

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=float).reshape(-1)
        self.trust = np.asarray(self.trust, dtype=float)
        if self.trust.ndim == 1:
            self.trust = self.trust[:, None]
        if self.trust.ndim != 2 or self.trust.shape[0] != self.sizes.size:
            raise InvalidInputError("trust must be (clients, servers) with one size per client")
        if not np.all(np.isfinite(self.trust)):
            raise InvalidInputError("trust levels must be finite")
        if np.any(self.sizes <= 0):
            raise InvalidInputError("data sizes must be positive")
        if self.capacity is None:
            self.capacity = default_capacity(self.num_clients, self.num_servers)
        if self.capacity < 1:
            raise InvalidInputError("server capacity must be >= 1")

    @property
    def num_clients(self) -> int:
        return self.trust.shape[0]

    @property
    def num_servers(self) -> int:
        return self.trust.shape[1]

    @property
    def eligible(self) -> np.ndarray:
        return self.trust >= self.threshold


def default_capacity(num_clients, num_servers) -> int:
    return 2 * math.ceil(num_clients / num_servers)


def server_weight(num_servers) -> float:
    """Distribution parameter ``D_m = 1 / (1 + S)``."""
    return 1.0 / (1.0 + num_servers)


def surrogate_objective(d, inst: SchedulingInstance) -> float:
    """Error term ``B`` of an association; empty servers contribute nothing.

    Threshold violations are scored (through the indicator) rather than rejected.
    """
    d = np.asarray(d)
    if d.shape != inst.trust.shape:
        raise InvalidInputError(f"association has shape {d.shape}, expected {inst.trust.shape}")
    d = d.astype(float)
    load = inst.sizes @ d  # N_m per server
    penalty = server_weight(inst.num_servers) - 1.0 + (inst.trust < inst.threshold)
    per_server = (inst.sizes[:, None] * d * penalty).sum(axis=0)
    occupied = load > 0
    return float(np.sum(per_server[occupied] / load[occupied]))


def check_feasible(d, inst: SchedulingInstance) -> dict:
    """Which of the three association constraints ``d`` satisfies."""
    d = np.asarray(d).astype(bool)
    return {
        "one_server_per_client": bool(np.all(d.sum(axis=1) <= 1)),
        "capacity": bool(np.all(d.sum(axis=0) <= inst.capacity)),
        "threshold": bool(np.all(inst.trust[d] >= inst.threshold)),
    }


def is_feasible(d, inst: SchedulingInstance) -> bool:
    return all(check_feasible(d, inst).values())


def _assign_in_order(inst, pairs):
    d = np.zeros(inst.trust.shape, dtype=np.int8)
    load = np.zeros(inst.num_servers, dtype=int)
    taken = np.zeros(inst.num_clients, dtype=bool)
    for i, s in pairs:
        if load[s] < inst.capacity and not taken[i] and inst.trust[i, s] >= inst.threshold:
            d[i, s] = 1
            load[s] += 1
            taken[i] = True
    return d


def greedy_schedule(inst: SchedulingInstance, order="descending") -> np.ndarray:
    """Walk (client, server) pairs by trust level, assigning while feasible.

    ``order="descending"`` visits the most trusted pairs first; ``"ascending"``
    visits the least trusted first. Ties go to the lower client, then lower
    server index.
    """
    if order not in ("descending", "ascending"):
        raise InvalidInputError("order must be 'descending' or 'ascending'")
    U, S = inst.trust.shape
    ii, ss = np.meshgrid(np.arange(U), np.arange(S), indexing="ij")
    key = -inst.trust if order == "descending" else inst.trust
    idx = np.lexsort((ss.ravel(), ii.ravel(), key.ravel()))
    return _assign_in_order(inst, zip(ii.ravel()[idx], ss.ravel()[idx]))


def random_schedule(inst: SchedulingInstance, seed) -> np.ndarray:
    """Random allocation: visit eligible pairs in a random order, assigning while feasible."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pairs = np.argwhere(inst.eligible)
    pairs = pairs[rng.permutation(len(pairs))]
    return _assign_in_order(inst, (tuple(p) for p in pairs))


def trust_only_schedule(inst: SchedulingInstance) -> np.ndarray:
    """Admit every client whose best trust clears the threshold; deal them round-robin."""
    d = np.zeros(inst.trust.shape, dtype=np.int8)
    load = np.zeros(inst.num_servers, dtype=int)
    nxt = 0
    for i in range(inst.num_clients):
        if inst.trust[i].max() < inst.threshold:
            continue
        for k in range(inst.num_servers):
            s = (nxt + k) % inst.num_servers
            if load[s] < inst.capacity and inst.trust[i, s] >= inst.threshold:
                d[i, s] = 1
                load[s] += 1
                nxt = (s + 1) % inst.num_servers
                break
    return d


def _objective_many(choices, inst):
    """B for a batch of assignments encoded as server-or-(-1) per client."""
    S = inst.num_servers
    K = choices.shape[0]
    load = np.zeros((K, S))
    pen = np.zeros((K, S))
    penalty = server_weight(S) - 1.0 + (inst.trust < inst.threshold)
    for i in range(inst.num_clients):
        c = choices[:, i]
        on = c >= 0
        np.add.at(load, (np.nonzero(on)[0], c[on]), inst.sizes[i])
        np.add.at(pen, (np.nonzero(on)[0], c[on]), inst.sizes[i] * penalty[i, c[on]])
    with np.errstate(divide="ignore", invalid="ignore"):
        per = np.where(load > 0, pen / load, 0.0)
    return per.sum(axis=1), load


def exhaustive_schedule(inst: SchedulingInstance, limit=EXHAUSTIVE_LIMIT):
    """Minimum-``B`` feasible association by enumeration. Returns ``(d, B)``.

    Among optimal associations the lexicographically smallest flattened ``d``
    is returned.
    """
    U, S = inst.trust.shape
    if (S + 1) ** U > limit:
        raise SizeLimitError(f"{S + 1}^{U} candidate associations exceed the limit {limit}")
    # per-client options in increasing lexicographic order of the client's row:
    # unassigned (all zeros) first, then the 1 placed as far right as possible
    options = [[-1] + [s for s in range(S - 1, -1, -1) if inst.eligible[i, s]] for i in range(U)]
    best_val, best = np.inf, None
    chunk = 1 << 16
    it = itertools.product(*options)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=int).reshape(-1, U)
        if block.size == 0:
            break
        vals, _ = _objective_many(block, inst)
        counts = np.stack([(block == s).sum(axis=1) for s in range(S)], axis=1)
        vals = np.where(np.all(counts <= inst.capacity, axis=1), vals, np.inf)
        k = int(np.argmax(vals <= vals.min() + 1e-12))
        if vals[k] < best_val - 1e-12:
            best_val, best = float(vals[k]), block[k].copy()
    d = np.zeros((U, S), dtype=np.int8)
    for i, s in enumerate(best):
        if s >= 0:
            d[i, s] = 1
    return d, surrogate_objective(d, inst)


SOLVERS = {
    "trail": lambda inst, seed=None, order="descending": greedy_schedule(inst, order),
    "greedy": lambda inst, seed=None, order="descending": greedy_schedule(inst, order),
    "random": lambda inst, seed=None, order=None: random_schedule(inst, seed),
    "trust-only": lambda inst, seed=None, order=None: trust_only_schedule(inst),
    "exhaustive": lambda inst, seed=None, order=None: exhaustive_schedule(inst)[0],
}


def solve(inst: SchedulingInstance, solver="trail", seed=None, order="descending") -> np.ndarray:
    try:
        fn = SOLVERS[solver]
    except KeyError:
        raise InvalidInputError(f"unknown solver {solver!r}; choose from {sorted(SOLVERS)}") from None
    return fn(inst, seed=seed, order=order)


@dataclass
class BoundParams:
    """Constants of the convergence bound (learning rate fixed at ``1/L``)."""

    mu: float
    L: float
    omega1: float = 0.01
    omega2: float = 0.01
    initial_gap: float = 1.0
    B: float = 0.0

    def __post_init__(self):
        if self.mu <= 0 or self.L < self.mu:
            raise InvalidInputError("need 0 < mu <= L")
        if min(self.omega1, self.omega2, self.initial_gap, self.B) < 0:
            raise InvalidInputError("omega1, omega2, the initial gap and B must be non-negative")

    @property
    def learning_rate(self) -> float:
        return 1.0 / self.L


def contraction_factor(p: BoundParams):
    """Per-round contraction ``D`` and whether it is below one."""
    D = 1.0 - p.mu / p.L + 4.0 * p.omega2 * p.mu * p.B / p.L
    return D, D < 1.0


def convergence_bound(p: BoundParams, t) -> float:
    """Upper bound on the expected optimality gap after ``t`` rounds."""
    if t < 0:
        raise InvalidInputError("t must be non-negative")
    D, _ = contraction_factor(p)
    if D == 1.0:
        raise InvalidInputError("D == 1: the geometric series is degenerate")
    Dt = D**t
    return Dt * p.initial_gap + (2.0 * p.omega1 * p.B / p.L) * (1.0 - Dt) / (1.0 - D)
