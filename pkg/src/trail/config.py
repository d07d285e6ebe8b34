"""Experiment configuration: TOML sections mapped onto nested dataclasses.

Every field has a default; the defaults reproduce the full-scale setting
(50 clients, 5 servers, 100 local steps, 100 aggregations per block, lr 0.01,
momentum 0.05, batch 32). Desk-scale profiles live in ``configs/``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from trail.errors import InvalidInputError


class ConfigError(InvalidInputError):
    """A configuration field is missing, unknown or out of range."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 20
    spread: float = 1.0
    separation: float = 1.0
    test_count: int = 2000
    images: str = ""
    labels: str = ""


@dataclass
class PartitionSpec:
    policy: str = "iid"
    size: int = 1000
    concentration: float = 1.0


@dataclass
class ModelSpec:
    kind: str = "logistic"
    hidden: int = 32


@dataclass
class TrainingSpec:
    local_steps: int = 100  # T1
    aggregations: int = 100  # T2, intra-cluster aggregations per consensus block
    horizon: int = 40  # consensus blocks
    lr: float = 0.01
    momentum: float = 0.05
    batch: int = 32


@dataclass
class DegradationSpec:
    fraction: float = 0.3
    onset: int = 20  # aggregation round at which the ramps start
    onset_jitter: int = 10
    noise_start: float = 0.0
    noise_end: float = 0.9
    noise_slope: float = 0.03
    noise_kind: str = "shift"
    loss_start: float = 0.0
    loss_end: float = 0.6
    loss_slope: float = 0.02
    base_loss: float = 0.05  # packet loss of every client, degrading or not


@dataclass
class HsmmSpec:
    states: int = 3
    window: int = 40
    fit_every: int = 10
    max_iters: int = 20
    min_var: float = 5e-3
    lifespan: float = 0.0  # 0 means the total number of aggregation rounds
    delivery_window: int = 5
    absent: str = "carry"


@dataclass
class SchedulerSpec:
    solver: str = "trail"
    order: str = "descending"
    threshold: float | str = float("-inf")
    capacity: int = 0  # 0 means twice the even split
    every: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    clients: int = 50
    servers: int = 5
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    hsmm: HsmmSpec = field(default_factory=HsmmSpec)
    scheduler: SchedulerSpec = field(default_factory=SchedulerSpec)
    out: str = "runs/out"

    @property
    def capacity(self) -> int:
        if self.scheduler.capacity:
            return self.scheduler.capacity
        return 2 * math.ceil(self.clients / self.servers)

    @property
    def rounds(self) -> int:
        return self.training.aggregations * self.training.horizon

    @property
    def lifespan(self) -> float:
        return self.hsmm.lifespan or float(self.rounds)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with whole fields or ``section={key: value}`` overrides."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        thr = d["scheduler"]["threshold"]
        if isinstance(thr, float) and not math.isfinite(thr):
            d["scheduler"]["threshold"] = str(thr)
        return d

    def validate(self):
        _check(self.clients >= 1, "clients", "must be >= 1")
        _check(self.servers >= 1, "servers", "must be >= 1")
        _check(self.capacity >= 1, "scheduler.capacity", "must be >= 1")
        ds = self.dataset
        _check(ds.kind in ("synthetic", "idx"), "dataset.kind", "must be 'synthetic' or 'idx'")
        if ds.kind == "synthetic":
            _check(ds.classes >= 2, "dataset.classes", "must be >= 2")
            _check(ds.dim >= 1, "dataset.dim", "must be >= 1")
            _check(ds.spread >= 0, "dataset.spread", "must be >= 0")
        else:
            for name in ("images", "labels"):
                path = getattr(ds, name)
                _check(bool(path) and Path(path).is_file(), f"dataset.{name}", f"file not found: {path!r}")
        _check(ds.test_count >= 1, "dataset.test_count", "must be >= 1")
        _check(self.partition.policy in ("iid", "label-skew"), "partition.policy", "must be 'iid' or 'label-skew'")
        _check(self.partition.size >= 1, "partition.size", "must be >= 1")
        _check(self.partition.concentration > 0, "partition.concentration", "must be > 0")
        _check(self.model.kind in ("logistic", "mlp"), "model.kind", "must be 'logistic' or 'mlp'")
        _check(self.model.hidden >= 1, "model.hidden", "must be >= 1")
        tr = self.training
        for name in ("aggregations", "horizon", "batch"):
            _check(getattr(tr, name) >= 1, f"training.{name}", "must be >= 1")
        _check(tr.local_steps >= 0, "training.local_steps", "must be >= 0")
        _check(tr.lr > 0, "training.lr", "must be > 0")
        _check(0 <= tr.momentum < 1, "training.momentum", "must lie in [0, 1)")
        dg = self.degradation
        _check(0 <= dg.fraction <= 1, "degradation.fraction", "must lie in [0, 1]")
        for name in ("noise_start", "noise_end", "loss_start", "loss_end", "base_loss"):
            _check(0 <= getattr(dg, name) <= 1, f"degradation.{name}", "must lie in [0, 1]")
        _check(dg.onset >= 0 and dg.onset_jitter >= 0, "degradation.onset", "onset and jitter must be >= 0")
        _check(dg.noise_kind in ("shift", "uniform"), "degradation.noise_kind", "must be 'shift' or 'uniform'")
        hs = self.hsmm
        _check(hs.states >= 2, "hsmm.states", "must be >= 2")
        _check(hs.window >= 2, "hsmm.window", "must be >= 2")
        _check(hs.fit_every >= 1, "hsmm.fit_every", "must be >= 1")
        _check(hs.max_iters >= 1, "hsmm.max_iters", "must be >= 1")
        _check(hs.min_var > 0, "hsmm.min_var", "must be > 0")
        _check(hs.lifespan >= 0, "hsmm.lifespan", "must be >= 0")
        _check(hs.delivery_window >= 1, "hsmm.delivery_window", "must be >= 1")
        _check(hs.absent in ("carry", "zero"), "hsmm.absent", "must be 'carry' or 'zero'")
        sc = self.scheduler
        _check(sc.solver in ("trail", "greedy", "random", "trust-only", "exhaustive"), "scheduler.solver",
               "must be one of trail, greedy, random, trust-only, exhaustive")
        _check(sc.order in ("descending", "ascending"), "scheduler.order", "must be 'descending' or 'ascending'")
        _check(sc.every >= 1, "scheduler.every", "must be >= 1")
        _check(sc.threshold == "auto" or isinstance(sc.threshold, float), "scheduler.threshold",
               "must be a number or 'auto'")
        return self


def _check(ok, name, message):
    if not ok:
        raise ConfigError(name, message)


_SECTIONS = {
    "dataset": DatasetSpec, "partition": PartitionSpec, "model": ModelSpec, "training": TrainingSpec,
    "degradation": DegradationSpec, "hsmm": HsmmSpec, "scheduler": SchedulerSpec,
}


def _coerce(section, f, value):
    name = f"{section}.{f.name}" if section else f.name
    default = f.default
    if f.name == "threshold":
        if isinstance(value, str):
            if value == "auto":
                return value
            try:
                return float(value)
            except ValueError:
                raise ConfigError(name, f"expected a number or 'auto', got {value!r}") from None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(name, f"expected a number or 'auto', got {value!r}")
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(name, f"unexpected boolean {value!r}")
    if isinstance(default, int):
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(name, f"expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(section, "expected a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}" if section else key, "unknown field")
    kwargs = {}
    for key, value in data.items():
        if section == "" and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = _coerce(section, known[key], value)
    return cls(**kwargs)


def from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, dict(data), "").validate()


def load_config(path, **overrides) -> ExperimentConfig:
    """Parse a TOML file. Top-level ``overrides`` (e.g. ``seed``, ``out``) win over the file."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return from_dict(data)
