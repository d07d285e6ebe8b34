"""Classification datasets and client sharding.

Synthetic Gaussian-cluster data stands in for image corpora at desk scale;
MNIST-style IDX files can be loaded directly. Shards are disjoint index sets
into a dataset.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from trail._io import atomic_write_bytes
from trail.errors import FormatError, InvalidInputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRLD_MAGIC = b"TRLD"
TRLD_VERSION = 1


@dataclass(eq=False)
class Dataset:
    features: np.ndarray  # (count, dim)
    labels: np.ndarray  # (count,)
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError("features must be (count, dim) with one label per row")
        if self.features.shape[0] < 1:
            raise InvalidInputError("dataset is empty")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise InvalidInputError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features must be finite")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.provenance)


def gen_synthetic(classes, dim, count, spread=1.0, seed=0, separation=1.0) -> Dataset:
    """Balanced Gaussian clusters around seeded class centres.

    Centres are drawn from ``N(0, separation^2 I)``; points scatter around
    their centre with standard deviation ``spread``.
    """
    if classes < 2 or dim < 1 or count < classes or spread < 0:
        raise InvalidInputError("need classes >= 2, dim >= 1, count >= classes, spread >= 0")
    rng = np.random.default_rng(seed)
    centres = separation * rng.standard_normal((classes, dim))
    labels = rng.permutation(np.arange(count) % classes)
    features = centres[labels] + spread * rng.standard_normal((count, dim))
    return Dataset(features, labels, classes, "synthetic")


def _read_header(data, offset, fmt, what):
    size = struct.calcsize(fmt)
    if len(data) < offset + size:
        raise FormatError(f"{what}: truncated header", offset=len(data))
    return struct.unpack_from(fmt, data, offset)


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (magic,) = _read_header(data, 0, ">I", "images")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", offset=0)
    count, rows, cols = _read_header(data, 4, ">III", "images")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise FormatError(f"images: expected {need} bytes, file has {len(data)}", offset=len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (magic,) = _read_header(data, 0, ">I", "labels")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", offset=0)
    (count,) = _read_header(data, 4, ">I", "labels")
    if len(data) < 8 + count:
        raise FormatError(f"labels: expected {8 + count} bytes, file has {len(data)}", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).copy()


def load_idx(images_path, labels_path, num_classes=None) -> Dataset:
    """MNIST-format image/label pair; pixels scaled to [0, 1] and flattened."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}", offset=4)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    feats = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes, "idx-file")


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(count, rows, cols)`` and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    atomic_write_bytes(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    atomic_write_bytes(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def save_trld(path, ds: Dataset):
    """Versioned binary container: header, then float32 features and int32 labels (little-endian)."""
    header = TRLD_MAGIC + struct.pack("<IIII", TRLD_VERSION, len(ds), ds.dim, ds.num_classes)
    body = ds.features.astype("<f4").tobytes() + ds.labels.astype("<i4").tobytes()
    atomic_write_bytes(path, header + body)


def load_trld(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TRLD_MAGIC:
        raise FormatError("not a TRLD container", offset=0)
    version, count, dim, classes = _read_header(data, 4, "<IIII", "TRLD")
    if version != TRLD_VERSION:
        raise FormatError(f"unsupported TRLD version {version}", offset=4)
    nfeat = count * dim * 4
    if len(data) < 20 + nfeat + count * 4:
        raise FormatError("TRLD payload truncated", offset=len(data))
    feats = np.frombuffer(data, dtype="<f4", count=count * dim, offset=20).reshape(count, dim)
    labels = np.frombuffer(data, dtype="<i4", count=count, offset=20 + nfeat)
    return Dataset(feats.astype(float), labels.astype(np.int64), classes, "synthetic")


@dataclass(frozen=True)
class PartitionPlan:
    sizes: tuple
    policy: str = "iid"
    concentration: float = 1.0
    seed: int = 0


def partition(ds: Dataset, plan: PartitionPlan, num_clients=None) -> list:
    """Disjoint index arrays, one per client, of exactly the planned sizes.

    ``iid`` samples uniformly without replacement. ``label-skew`` draws each
    client's class mix from a symmetric Dirichlet with the plan's
    concentration, then fills the quota class by class from what is left.
    """
    sizes = [int(s) for s in plan.sizes]
    if num_clients is not None and num_clients != len(sizes):
        raise InvalidInputError(f"plan has {len(sizes)} sizes for {num_clients} clients")
    if any(s < 1 for s in sizes) or sum(sizes) > len(ds):
        raise InvalidInputError(f"cannot carve shards of sizes summing to {sum(sizes)} from {len(ds)} samples")
    rng = np.random.default_rng(plan.seed)
    if plan.policy == "iid":
        perm = rng.permutation(len(ds))
        bounds = np.cumsum([0] + sizes)
        return [np.sort(perm[bounds[k]:bounds[k + 1]]) for k in range(len(sizes))]
    if plan.policy != "label-skew":
        raise InvalidInputError(f"unknown partition policy {plan.policy!r}")
    if plan.concentration <= 0:
        raise InvalidInputError("concentration must be positive")

    C = ds.num_classes
    pools = [list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(C)]
    shards = []
    for size in sizes:
        props = rng.dirichlet(np.full(C, plan.concentration))
        want = np.floor(props * size).astype(int)
        # hand out the rounding remainder to the largest fractional parts
        rem = size - want.sum()
        want[np.argsort(-(props * size - want), kind="stable")[:rem]] += 1
        avail = np.array([len(p) for p in pools])
        take = np.minimum(want, avail)
        short = size - take.sum()
        while short > 0:
            spare = avail - take
            c = int(np.argmax(spare))
            add = min(short, spare[c])
            take[c] += add
            short -= add
        idx = []
        for c in range(C):
            idx.extend(pools[c][:take[c]])
            pools[c] = pools[c][take[c]:]
        shards.append(np.sort(np.array(idx, dtype=int)))
    return shards
