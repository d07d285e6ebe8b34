"""End-to-end experiment: scheduling, local training, aggregation and trust tracking.

Time is counted in intra-cluster aggregation rounds, 1-based. Every
``aggregations`` rounds the servers reach consensus; ``horizon`` such blocks
make up a run. All randomness comes from named streams under the root seed.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trail import rng as rngs
from trail._io import atomic_write_csv, atomic_write_text
from trail.config import ExperimentConfig
from trail.datasets import Dataset, PartitionPlan, gen_synthetic, load_idx, partition
from trail.errors import InvalidInputError, NumericalDegeneracyError, NumericalDivergenceError
from trail.fedsim.core import (
    METRICS_CSV_HEADER, ClientState, DegradationProfile, RoundMetrics, apply_uplink,
    emit_observation, global_loss, inter_consensus, intra_aggregate, local_train,
)
from trail.fedsim.models import ModelVector, accuracy, init_model
from trail.hsmm import baum_welch_fit, initial_model
from trail.scheduler import SchedulingInstance, random_schedule, solve, surrogate_objective
from trail.trust import DwellStats, trust_records, write_trust_csv

TRUST_SOLVERS = ("trail", "greedy", "trust-only", "exhaustive")


@dataclass
class World:
    clients: list
    test: Dataset
    degrading: np.ndarray  # client ids on a degradation ramp


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list = field(default_factory=list)
    trust: list = field(default_factory=list)
    global_model: ModelVector | None = None
    server_models: list = field(default_factory=list)
    hsmm: object = None
    degrading: tuple = ()

    def summary(self) -> dict:
        accs = [m.test_acc for m in self.metrics]
        return {
            "final_acc": accs[-1],
            "best_acc": max(accs),
            "final_loss": self.metrics[-1].train_loss,
            "mean_B": float(np.mean([m.B for m in self.metrics])),
            "rounds": len(self.metrics),
            "degrading_clients": list(self.degrading),
            "config": self.config.to_dict(),
        }


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "idx":
        return load_idx(ds.images, ds.labels)
    count = cfg.clients * cfg.partition.size + ds.test_count
    return gen_synthetic(ds.classes, ds.dim, count, ds.spread, rngs.derive_seed(cfg.seed, "dataset"),
                         separation=ds.separation)


def build_world(cfg: ExperimentConfig) -> World:
    data = _load_dataset(cfg)
    if len(data) < cfg.dataset.test_count + cfg.clients * cfg.partition.size:
        raise InvalidInputError(
            f"dataset has {len(data)} samples; need {cfg.dataset.test_count} test plus "
            f"{cfg.clients} x {cfg.partition.size} for clients")
    perm = rngs.stream(cfg.seed, "split").permutation(len(data))
    test = data.subset(np.sort(perm[: cfg.dataset.test_count]))
    train = data.subset(np.sort(perm[cfg.dataset.test_count:]))
    plan = PartitionPlan((cfg.partition.size,) * cfg.clients, cfg.partition.policy,
                         cfg.partition.concentration, rngs.derive_seed(cfg.seed, "partition"))
    shards = partition(train, plan, cfg.clients)

    dg = cfg.degradation
    k = int(round(dg.fraction * cfg.clients))
    cohort_rng = rngs.stream(cfg.seed, "cohort")
    degrading = np.sort(cohort_rng.choice(cfg.clients, size=k, replace=False)) if k else np.array([], int)
    onsets = dg.onset + cohort_rng.integers(0, dg.onset_jitter + 1, size=cfg.clients)

    init = init_model(cfg.model.kind, train.dim, train.num_classes, cfg.model.hidden,
                      rngs.stream(cfg.seed, "init"))
    clients = []
    for i, idx in enumerate(shards):
        if i in degrading:
            profile = DegradationProfile(
                onset=int(onsets[i]), noise_start=dg.noise_start, noise_end=dg.noise_end,
                noise_slope=dg.noise_slope, loss_start=max(dg.loss_start, dg.base_loss),
                loss_end=max(dg.loss_end, dg.base_loss), loss_slope=dg.loss_slope, noise_kind=dg.noise_kind)
        else:
            profile = DegradationProfile.healthy(dg.base_loss)
        feats = train.features[idx]
        labels = train.labels[idx]
        feats.flags.writeable = False
        labels.flags.writeable = False
        clients.append(ClientState(i, feats, labels, init.copy(), profile, rngs.derive_seed(cfg.seed, "client", i)))
    return World(clients, test, degrading)


def _histories(clients, window):
    """(U, T, 2) observation window with gaps filled so every row is complete."""
    acc = np.array([c.accuracy_history[-window:] for c in clients], dtype=float)
    dlv = np.array([c.delivery_history[-window:] for c in clients], dtype=float)
    z = np.stack([acc, dlv], axis=2)
    for ch in range(2):
        col = z[:, :, ch]
        fallback = np.nanmean(col) if np.any(np.isfinite(col)) else 0.0
        for row in col:
            ok = np.flatnonzero(np.isfinite(row))
            if ok.size == 0:
                row[:] = fallback
            else:
                row[: ok[0]] = row[ok[0]]  # back-fill rounds before the first observation
    return z


class _TrustTracker:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = None
        self.stats = None
        self.levels = np.full(cfg.clients, cfg.lifespan)

    @property
    def fitted(self):
        return self.model is not None

    def threshold(self):
        thr = self.cfg.scheduler.threshold
        if thr != "auto":
            return thr
        if self.stats is None:
            return float("-inf")
        return float(self.stats.residences()[-1])

    def update(self, clients, t):
        hs = self.cfg.hsmm
        z = _histories(clients, hs.window)
        seqs = list(z)
        init = self.model or initial_model(seqs, hs.states, hs.window, hs.min_var)
        try:
            model, _ = baum_welch_fit(init, seqs, max_iters=hs.max_iters, tol=1e-4, min_var=hs.min_var)
            model = model.permute_states(np.argsort(-model.emission_mean[:, 0], kind="stable"))
            stats = DwellStats.from_model(model, self.cfg.lifespan)
            records = trust_records(model, None, z, stats, clients=range(len(clients)), round_index=t)
        except (NumericalDegeneracyError, InvalidInputError):
            return []  # keep the previous trust levels
        self.model, self.stats = model, stats
        self.levels = np.array([r.trust for r in records])
        return records


def _schedule(cfg, clients, tracker, t):
    S = cfg.servers
    sizes = np.array([c.n for c in clients], dtype=float)
    trust = np.repeat(tracker.levels[:, None], S, axis=1)
    inst = SchedulingInstance(sizes, trust, tracker.threshold(), cfg.capacity)
    sched_rng = rngs.stream(cfg.seed, "schedule", t)
    solver = cfg.scheduler.solver
    if solver in TRUST_SOLVERS and not tracker.fitted:
        d = random_schedule(inst, sched_rng)  # explore until the first trust estimate exists
    else:
        d = solve(inst, solver, seed=sched_rng, order=cfg.scheduler.order)
    return d, surrogate_objective(d, inst)


def run_experiment(cfg: ExperimentConfig, jobs=1, progress=None) -> ExperimentResult:
    """Run one configured experiment. ``jobs`` threads train clients concurrently."""
    cfg.validate()
    world = build_world(cfg)
    clients = world.clients
    tr = cfg.training
    S = cfg.servers
    g = clients[0].model.copy()
    servers = [g.copy() for _ in range(S)]
    tracker = _TrustTracker(cfg)
    result = ExperimentResult(cfg, degrading=tuple(int(i) for i in world.degrading))
    block_members = [set() for _ in range(S)]
    d = np.zeros((cfg.clients, S), dtype=np.int8)
    B = 0.0
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None

    def train(job):
        i, s, t = job
        c = clients[i]
        return local_train(c, servers[s], tr.local_steps, tr.lr, tr.momentum, tr.batch,
                           rng=rngs.stream(cfg.seed, "client", i, "train", t), round_index=t)

    try:
        for t in range(1, cfg.rounds + 1):
            if (t - 1) % cfg.scheduler.every == 0:
                d, B = _schedule(cfg, clients, tracker, t)
            assigned = {int(i): int(s) for i, s in np.argwhere(d)}
            jobs_t = [(i, assigned[i], t) for i in sorted(assigned)]
            try:
                trained = list(pool.map(train, jobs_t)) if pool else [train(j) for j in jobs_t]
            except NumericalDivergenceError as exc:
                raise NumericalDivergenceError(f"round {t}: {exc}", client=exc.client, step=exc.step) from exc

            uploads = [[] for _ in range(S)]
            dropped = 0
            new_models = dict(zip(sorted(assigned), trained))
            for c in clients:
                model = new_models.get(c.cid)
                delivered = False
                if model is not None:
                    c.model = model
                    link = rngs.stream(cfg.seed, "client", c.cid, "uplink", t)
                    delivered = apply_uplink(model, c.profile.loss_prob(t), link)
                    if delivered:
                        uploads[assigned[c.cid]].append((model, c.n))
                        block_members[assigned[c.cid]].add(c.cid)
                    else:
                        dropped += 1
                emit_observation(c, model, delivered, cfg.hsmm.delivery_window, cfg.hsmm.absent)

            for s in range(S):
                servers[s], _ = intra_aggregate(uploads[s], servers[s])
            for i, s in assigned.items():
                clients[i].model = servers[s].copy()

            block_sizes = [sum(clients[i].n for i in members) for members in block_members]
            if t % tr.aggregations == 0:
                g, _ = inter_consensus(list(zip(servers, block_sizes)), g)
                servers = [g.copy() for _ in range(S)]
                block_members = [set() for _ in range(S)]
                evaluated = g
            else:
                evaluated, _ = inter_consensus(list(zip(servers, block_sizes)), g)

            participants = [clients[i] for i in sorted(assigned)] or clients
            result.metrics.append(RoundMetrics(
                round=t,
                test_acc=accuracy(evaluated, world.test.features, world.test.labels),
                train_loss=global_loss(evaluated, participants),
                B=B,
                participants=tuple(int(x) for x in d.sum(axis=0)),
                dropped=dropped,
            ))

            if t % cfg.hsmm.fit_every == 0:
                result.trust.extend(tracker.update(clients, t))
            if progress is not None:
                progress(result.metrics[-1])
    finally:
        if pool is not None:
            pool.shutdown()

    result.global_model = g
    result.server_models = servers
    result.hsmm = tracker.model
    return result


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    """Write metrics.csv, trust.csv, models.json and summary.json; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_csv(out / "metrics.csv", METRICS_CSV_HEADER, [m.csv_row() for m in result.metrics])
    write_trust_csv(out / "trust.csv", result.trust)
    models = {
        "format_version": 1,
        "global": result.global_model.to_dict(),
        "servers": [m.to_dict() for m in result.server_models],
        "hsmm": None if result.hsmm is None else result.hsmm.to_dict(),
    }
    atomic_write_text(out / "models.json", json.dumps(models, indent=1) + "\n")
    summary = result.summary()
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    return summary

