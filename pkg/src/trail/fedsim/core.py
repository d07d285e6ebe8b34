"""Round-level operations of semi-decentralized training.

Clients train locally with mini-batch SGD, uploads cross an unreliable link,
each edge server averages what it received, and servers reach consensus by a
size-weighted average. Degrading clients suffer a label-noise ramp (training
quality) and a packet-loss ramp (communication).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trail.errors import InvalidInputError, NumericalDivergenceError
from trail.fedsim.models import ModelVector, accuracy, cross_entropy, loss_and_grad


def _ramp(t, onset, start, end, slope):
    if t < onset:
        return start
    v = start + slope * (t - onset)
    return float(min(v, end) if end >= start else max(v, end))


@dataclass(frozen=True)
class DegradationProfile:
    """Label-noise and packet-loss probabilities as functions of the round."""

    onset: int = 0
    noise_start: float = 0.0
    noise_end: float = 0.0
    noise_slope: float = 0.0
    loss_start: float = 0.0
    loss_end: float = 0.0
    loss_slope: float = 0.0
    noise_kind: str = "shift"

    def __post_init__(self):
        for name in ("noise_start", "noise_end", "loss_start", "loss_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_kind not in ("shift", "uniform"):
            raise InvalidInputError("noise_kind must be 'shift' or 'uniform'")

    @classmethod
    def healthy(cls, loss=0.0) -> "DegradationProfile":
        return cls(loss_start=loss, loss_end=loss)

    def noise_prob(self, t) -> float:
        return _ramp(t, self.onset, self.noise_start, self.noise_end, self.noise_slope)

    def loss_prob(self, t) -> float:
        return _ramp(t, self.onset, self.loss_start, self.loss_end, self.loss_slope)


@dataclass(eq=False)
class ClientState:
    cid: int
    features: np.ndarray
    labels: np.ndarray
    model: ModelVector
    profile: DegradationProfile = field(default_factory=DegradationProfile)
    seed: int = 0
    accuracy_history: list = field(default_factory=list)
    delivery_history: list = field(default_factory=list)
    deliveries: list = field(default_factory=list)  # raw 0/1 indicators

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0] or self.features.shape[0] < 1:
            raise InvalidInputError(f"client {self.cid}: shard must be non-empty with one label per row")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class RoundMetrics:
    round: int
    test_acc: float
    train_loss: float
    B: float
    participants: tuple  # per server
    dropped: int

    def csv_row(self):
        return (self.round, repr(self.test_acc), repr(self.train_loss), repr(self.B),
                ";".join(str(p) for p in self.participants), self.dropped)


METRICS_CSV_HEADER = ("round", "test_acc", "train_loss", "B", "participants", "dropped")


def noisy_labels(labels, prob, classes, rng, kind="shift"):
    """Corrupt each label independently with probability ``prob``.

    ``shift`` maps ``y -> (y + 1) mod C`` (a consistent, harmful flip);
    ``uniform`` redraws the label uniformly over the classes.
    """
    flip = rng.random(labels.shape[0]) < prob
    if kind == "shift":
        repl = (labels + 1) % classes
    else:
        repl = rng.integers(0, classes, labels.shape[0])
    return np.where(flip, repl, labels)


def local_train(client: ClientState, init: ModelVector, steps, lr, momentum=0.0, batch=32,
                rng=None, round_index=0, trace=None) -> ModelVector:
    """``steps`` SGD-with-momentum steps on the client's shard, starting from ``init``.

    Label noise from the client's degradation profile is drawn per mini-batch
    before the gradient. The shard itself is never modified. If ``trace`` is a
    list, the mini-batch loss of each step is appended to it.
    """
    if lr <= 0:
        raise InvalidInputError("lr must be positive")
    if steps == 0:
        return init.copy()
    rng = np.random.default_rng(client.seed) if rng is None else rng
    X, y = client.features, client.labels
    n = client.n
    b = min(batch, n)
    p_noise = client.profile.noise_prob(round_index)
    w = init.w.copy()
    vel = np.zeros_like(w)
    for step in range(steps):
        idx = np.arange(n) if b == n else rng.choice(n, size=b, replace=False)
        yb = y[idx]
        if p_noise > 0:
            yb = noisy_labels(yb, p_noise, init.classes, rng, client.profile.noise_kind)
        loss, grad = loss_and_grad(init, X[idx], yb, w)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalDivergenceError(
                f"client {client.cid}: non-finite loss or gradient at local step {step}",
                client=client.cid, step=step)
        if trace is not None:
            trace.append(loss)
        vel = momentum * vel + grad
        w = w - lr * vel
    return init.with_params(w)


def apply_uplink(upload, loss_prob, rng) -> bool:
    """True when the upload is delivered; dropped with probability ``loss_prob``."""
    if not 0.0 <= loss_prob <= 1.0:
        raise InvalidInputError("loss probability must lie in [0, 1]")
    return bool(rng.random() >= loss_prob)


def _weighted_mean(vectors, weights):
    weights = np.asarray(weights, dtype=float)
    stack = np.stack([v.w for v in vectors])
    return (weights / weights.sum()) @ stack


def intra_aggregate(uploads, previous: ModelVector | None = None):
    """Size-weighted mean of delivered uploads ``[(model, n_i), ...]``.

    Returns ``(model, aggregated)``. With nothing delivered the server keeps
    ``previous`` and ``aggregated`` is False.
    """
    uploads = [(m, n) for m, n in uploads if n > 0]
    if not uploads:
        if previous is None:
            raise InvalidInputError("no uploads delivered and no previous model to keep")
        return previous, False
    if len(uploads) == 1:
        return uploads[0][0].copy(), True
    models, sizes = zip(*uploads)
    return models[0].with_params(_weighted_mean(models, sizes)), True


def inter_consensus(server_models, previous: ModelVector | None = None):
    """Global model ``g = sum_s N_s w_s / sum_s N_s``. Returns ``(g, reached)``."""
    return intra_aggregate(server_models, previous)


def global_loss(g: ModelVector, clients) -> float:
    """Sample-weighted mean cross-entropy of ``g`` on the clients' clean shards."""
    clients = list(clients)
    if not clients:
        raise InvalidInputError("need at least one client")
    sizes = np.array([c.n for c in clients], dtype=float)
    losses = np.array([cross_entropy(g, c.features, c.labels) for c in clients])
    return float(sizes @ losses / sizes.sum())


def window_mean(indicators, window=5) -> float:
    if not indicators:
        return 0.0
    return float(np.mean(indicators[-window:]))


def emit_observation(client: ClientState, model: ModelVector | None, delivered, window=5, absent="carry"):
    """Append this round's (accuracy, delivery) observation to the client's history.

    ``model`` is the client's freshly trained model, or None when the client
    was not scheduled. Unscheduled rounds repeat the previous accuracy; the
    delivery channel either ignores the round (``absent="carry"``) or records
    it as a miss (``"zero"``).
    """
    if model is not None:
        acc = accuracy(model, client.features, client.labels)
        client.deliveries.append(1.0 if delivered else 0.0)
    else:
        acc = client.accuracy_history[-1] if client.accuracy_history else np.nan
        if absent == "zero":
            client.deliveries.append(0.0)
    deliv = window_mean(client.deliveries, window) if client.deliveries else np.nan
    client.accuracy_history.append(acc)
    client.delivery_history.append(deliv)
    return acc, deliv
