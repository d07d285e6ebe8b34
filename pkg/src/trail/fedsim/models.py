"""Flat-vector classifiers with analytic cross-entropy gradients.

Two kinds are supported: multinomial logistic regression and a one-hidden-layer
ReLU network. Parameters live in one flat vector so that aggregation is plain
vector arithmetic; ``unpack`` gives named views into it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from trail.errors import InvalidInputError

KINDS = ("logistic", "mlp")


@dataclass(eq=False)
class ModelVector:
    kind: str
    dim: int
    classes: int
    w: np.ndarray
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "mlp" and self.hidden < 1:
            raise InvalidInputError("an mlp needs hidden >= 1")
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        expected = num_params(self.kind, self.dim, self.classes, self.hidden)
        if self.w.size != expected:
            raise InvalidInputError(f"{self.kind} model needs {expected} parameters, got {self.w.size}")
        if not np.all(np.isfinite(self.w)):
            raise InvalidInputError("model parameters must be finite")

    def with_params(self, w) -> "ModelVector":
        return ModelVector(self.kind, self.dim, self.classes, w, self.hidden)

    def copy(self) -> "ModelVector":
        return self.with_params(self.w.copy())

    def unpack(self, w=None) -> dict:
        return unpack(self.kind, self.dim, self.classes, self.hidden, self.w if w is None else w)

    def shape_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "classes": self.classes, "hidden": self.hidden}

    def to_dict(self) -> dict:
        return {"format_version": 1, **self.shape_dict(), "w": [float(x) for x in self.w]}

    @classmethod
    def from_dict(cls, d) -> "ModelVector":
        if d.get("format_version") != 1:
            raise InvalidInputError(f"unsupported model format version {d.get('format_version')!r}")
        return cls(d["kind"], int(d["dim"]), int(d["classes"]), np.array(d["w"], dtype=float), int(d["hidden"]))


def num_params(kind, dim, classes, hidden=0) -> int:
    if kind == "logistic":
        return dim * classes + classes
    return dim * hidden + hidden + hidden * classes + classes


def unpack(kind, dim, classes, hidden, w) -> dict:
    if kind == "logistic":
        return {"W": w[: dim * classes].reshape(dim, classes), "b": w[dim * classes:]}
    o = 0
    parts = {}
    for name, shape in (("W1", (dim, hidden)), ("b1", (hidden,)), ("W2", (hidden, classes)), ("b2", (classes,))):
        n = int(np.prod(shape))
        parts[name] = w[o:o + n].reshape(shape)
        o += n
    return parts


def init_model(kind, dim, classes, hidden=0, rng=None) -> ModelVector:
    """Zero logistic weights; He-scaled random first layer for the mlp."""
    w = np.zeros(num_params(kind, dim, classes, hidden))
    mv = ModelVector(kind, dim, classes, w, hidden)
    if kind == "mlp":
        if rng is None:
            raise InvalidInputError("mlp initialization needs an rng")
        p = mv.unpack()
        p["W1"][...] = rng.standard_normal((dim, hidden)) * np.sqrt(2.0 / dim)
        p["W2"][...] = rng.standard_normal((hidden, classes)) * np.sqrt(1.0 / hidden)
    return mv


def logits(model: ModelVector, X, w=None) -> np.ndarray:
    p = model.unpack(w)
    if model.kind == "logistic":
        return X @ p["W"] + p["b"]
    h = np.maximum(X @ p["W1"] + p["b1"], 0.0)
    return h @ p["W2"] + p["b2"]


def predict(model: ModelVector, X) -> np.ndarray:
    return np.argmax(logits(model, X), axis=1)


def accuracy(model: ModelVector, X, y) -> float:
    return float(np.mean(predict(model, X) == y))


def cross_entropy(model: ModelVector, X, y, w=None) -> float:
    """Mean per-sample cross-entropy."""
    lp = log_softmax(logits(model, X, w), axis=1)
    return float(-lp[np.arange(len(y)), y].mean())


def loss_and_grad(model: ModelVector, X, y, w=None):
    """Mean cross-entropy and its gradient with respect to the flat parameters."""
    w = model.w if w is None else w
    p = unpack(model.kind, model.dim, model.classes, model.hidden, w)
    n = X.shape[0]
    grad = np.empty_like(w)
    g = unpack(model.kind, model.dim, model.classes, model.hidden, grad)
    if model.kind == "logistic":
        z = X @ p["W"] + p["b"]
    else:
        pre = X @ p["W1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        z = h @ p["W2"] + p["b2"]
    lp = log_softmax(z, axis=1)
    loss = -lp[np.arange(n), y].mean()
    dz = np.exp(lp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if model.kind == "logistic":
        g["W"][...] = X.T @ dz
        g["b"][...] = dz.sum(axis=0)
    else:
        g["W2"][...] = h.T @ dz
        g["b2"][...] = dz.sum(axis=0)
        dh = (dz @ p["W2"].T) * (pre > 0)
        g["W1"][...] = X.T @ dh
        g["b1"][...] = dh.sum(axis=0)
    return float(loss), grad
